# about.py

__version__ = "0.1.0"
__package__ = "stream_ssm"
__program_name__ = "stream-ssm"
__author__ = "Fernando Pujaico Rivera"
__email__  = "fernando.pujaico.rivera@gmail.com"
__description__ = "Irregular-step state-space recurrences, parallel scans and adjoint gradients for point clouds and event streams"
__url_source__  = "https://github.com/trucomanx/StreamSsm"
__url_doc__  = "https://github.com/trucomanx/StreamSsm/tree/main/doc"
__url_funding__ = "https://trucomanx.github.io/en/funding.html"
__url_bugs__    = "https://github.com/trucomanx/StreamSsm/issues"
