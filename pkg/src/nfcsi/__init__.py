"""Near-field XL-MIMO CSI feedback: channel generation, ExtendNLNet autoencoder,
training and evaluation."""

from nfcsi.channel import (
    ChannelMatrix,
    DegenerateGeometryError,
    GeometryError,
    SystemGeometry,
    channel_entry,
    channel_matrix,
    pairwise_distance,
    rayleigh_distance,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelMatrix",
    "DegenerateGeometryError",
    "GeometryError",
    "SystemGeometry",
    "channel_entry",
    "channel_matrix",
    "pairwise_distance",
    "rayleigh_distance",
]
