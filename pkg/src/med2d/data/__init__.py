"""Dataset layout, codecs, splitting, synthetic corpora and the tensor container."""

from .container import (
    BadMagicError,
    ContainerError,
    DuplicateNameError,
    TruncatedError,
    VersionMismatchError,
    read_container,
    write_container,
)
from .dataset import (
    Dataset,
    DatasetError,
    SegmentationSample,
    SplitDescriptor,
    load_dataset,
    resize_bilinear,
    resize_nearest,
    split,
    to_float_image,
    write_dataset,
)
from .pnm import IMAGE_EXTENSIONS, DecodeError, read_image, read_pnm, write_pnm
from .synth import DEFAULT_SHIFT, NO_SHIFT, DomainShift, generate_corpus, synth_corpus

__all__ = [
    "BadMagicError",
    "ContainerError",
    "DuplicateNameError",
    "TruncatedError",
    "VersionMismatchError",
    "read_container",
    "write_container",
    "Dataset",
    "DatasetError",
    "SegmentationSample",
    "SplitDescriptor",
    "load_dataset",
    "resize_bilinear",
    "resize_nearest",
    "split",
    "to_float_image",
    "write_dataset",
    "IMAGE_EXTENSIONS",
    "DecodeError",
    "read_image",
    "read_pnm",
    "write_pnm",
    "DEFAULT_SHIFT",
    "NO_SHIFT",
    "DomainShift",
    "generate_corpus",
    "synth_corpus",
]
