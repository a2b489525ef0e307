"""Multi-component simulation of the encrypted KPM flow.

KDC -> keys; RAN encryptor -> ENC_KPM frames -> RIC database -> xApp ->
CONTROL frames back to the RAN. Components exchange only framed messages.
"""
