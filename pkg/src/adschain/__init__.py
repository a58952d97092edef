"""adschain: signed custody chains for programmatic ad transactions.

Library layout:

* ``tuuid``    time-based 128-bit transaction identifiers
* ``chain``    block/chain construction, canonical signing, verification
* ``crypto``   ECDSA P-256 / RSA-2048 primitives, certificates, trust store
* ``keydir``   partner public-key cache (LRU with time expiration)
* ``codec``    query-string and OpenRTB transports
* ``pipeline`` simulated delivery pipeline (publisher, SSP, AdX, DSPs)
* ``auditor``  online/offline chain and log auditing
* ``bench``    open-loop load generation and marginal-delay reports
* ``service``  FastAPI app wrapping the above
* ``cli``      command-line client (``adschain``)
"""

__version__ = "0.1.0"
