from .container import (
    ContainerChecksumError,
    ContainerError,
    ContainerVersionError,
    read_dataset,
    write_dataset,
)
from .ingest import MissingModalityError, iter_subject_dirs, read_subject_dir
from .nifti import (
    NiftiDtypeError,
    NiftiError,
    NiftiHeaderError,
    NiftiMagicError,
    NiftiTruncatedError,
    parse_nifti,
    read_nifti,
)
from .phantom import generate_phantom, generate_subject
from .preprocess import (
    LabelValueError,
    build_dataset,
    filter_and_slice,
    keeps_slice,
    next_power_of_two,
    pad_slice,
    preprocess_subject,
    remap_labels,
    rescale_intensity,
    split_validation,
)
from .types import (
    LABEL_NAMES,
    LABEL_REMAP,
    MODALITIES,
    PALETTE,
    SliceDataset,
    SliceSample,
    Subject5C,
    Volume,
)
