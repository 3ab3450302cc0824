"""Document image rectification lab (Python bindings)."""

from ._docgeo import (
    DocgeoError,
    MS_SSIM_WEIGHTS,
    Model,
    __version__,
    apply_flow,
    cer,
    cmd_generate,
    cmd_report,
    detect_lines,
    edit_distance,
    generate_sample,
    ld_from_flows,
    ms_ssim,
    read_flow,
    read_png,
    resize_to_area,
    ssim,
    write_flow,
    write_png,
)

__all__ = [
    "DocgeoError",
    "MS_SSIM_WEIGHTS",
    "Model",
    "__version__",
    "apply_flow",
    "cer",
    "cmd_generate",
    "cmd_report",
    "detect_lines",
    "edit_distance",
    "generate_sample",
    "ld_from_flows",
    "ms_ssim",
    "read_flow",
    "read_png",
    "resize_to_area",
    "ssim",
    "write_flow",
    "write_png",
]
