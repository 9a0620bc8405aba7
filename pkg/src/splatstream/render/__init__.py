"""Tile-based software rasterizer with left-to-right stereo list reuse."""

from .image import decode_png, decode_ppm, encode_png, encode_ppm, read_image, write_image
from .raster import (
    Framebuffer, PassRecord, ProjectedGaussians, TileLists, bin_tiles, blend_tiles, depth_sort,
    footprint_radius, preprocess, rasterize_mono, rasterize_naive, tile_spans, widened_fov,
)
from .stereo import (
    OffsetLists, StereoResult, StereoStats, border_columns, build_offset_lists, disparity,
    merge_tile_lists, merged_right_lists, rasterize_stereo, stereo_schedule, validate_schedule,
)

__all__ = [
    "decode_png", "decode_ppm", "encode_png", "encode_ppm", "read_image", "write_image",
    "Framebuffer", "PassRecord", "ProjectedGaussians", "TileLists", "bin_tiles", "blend_tiles",
    "depth_sort", "footprint_radius", "preprocess", "rasterize_mono", "rasterize_naive", "tile_spans",
    "widened_fov", "OffsetLists", "StereoResult", "StereoStats", "border_columns",
    "build_offset_lists", "disparity", "merge_tile_lists", "merged_right_lists", "rasterize_stereo",
    "stereo_schedule", "validate_schedule",
]
