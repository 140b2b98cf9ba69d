"""HTTP service exposing the package over FastAPI (``sindyloop serve``)."""
