"""Deep neural maps: a convolutional autoencoder trained jointly with a self-organizing map."""

__version__ = "0.1.0"
