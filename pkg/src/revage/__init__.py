"""Temporally consistent video face re-aging toolkit.

Three pillars: a paired synthetic video dataset factory, a recurrent
re-aging generator trained against dual image/video discriminators, and
temporal-consistency metrics for evaluating re-aged footage.
"""

__version__ = "0.1.0"

from .datamodel import (  # noqa: F401
    AgeMask,
    AgeValue,
    DatasetManifest,
    Frame,
    MaskedFrame,
    VideoClip,
    load_clip,
    load_manifest,
    make_age_mask,
    mask_frame,
    save_clip,
    save_manifest,
    validate_manifest,
)
