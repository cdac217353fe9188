class UnsupportedLayer(Exception):
    """A checkpoint layer has no counterpart in the portable format."""
