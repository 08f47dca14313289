"""latentmark: audio watermarking in the speaker-specific latents of a
small residual-VQ speech codec, built to survive zero-shot cloning-style
transformations."""

__version__ = "0.1.0"

from .audio import AudioBuffer, ClipDataset, load_wav, make_dataset, resample, save_wav
from .payload import WatermarkPayload, bits_to_hex, hex_to_bits, random_payload

__all__ = [
    "AudioBuffer",
    "ClipDataset",
    "WatermarkPayload",
    "bits_to_hex",
    "hex_to_bits",
    "load_wav",
    "make_dataset",
    "random_payload",
    "resample",
    "save_wav",
    "__version__",
]
