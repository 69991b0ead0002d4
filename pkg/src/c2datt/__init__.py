"""Speaker verification with channel-frequency convolutional attention."""

__version__ = "0.1.0"
