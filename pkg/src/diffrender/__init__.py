"""Differentiable triangle-mesh rendering and gradient-based mesh editing."""

from .geometry import (
    EdgeAdjacency,
    Mesh,
    ScreenVertices,
    Viewpoint,
    dihedral_cosines,
    edge_adjacency,
    generate_icosphere,
    load_obj,
    load_textures,
    save_obj,
    save_textures,
    transform_backward,
    transform_to_screen,
)
from .losses import (
    LossValue,
    ToyFeatureExtractor,
    content_loss,
    deepdream_loss,
    gram,
    load_mask,
    load_voxels,
    mesh_iou,
    save_mask,
    save_voxels,
    silhouette_loss,
    smoothness_loss,
    style_loss,
    total_variation,
    voxel_iou,
    voxelize,
)
from .optim import (
    AdamState,
    SphereDeformation,
    adam_step,
    load_adam_checkpoint,
    realize,
    realize_backward,
    save_adam_checkpoint,
)
from .raster_backward import (
    CrossPoint,
    GradientSet,
    backward_lighting,
    backward_render,
    backward_texture,
    backward_vertices,
    find_cross_points,
)
from .raster_forward import (
    ForwardInputs,
    Lighting,
    RenderBuffers,
    RenderOptions,
    apply_lighting,
    barycentric,
    downsample,
    load_image,
    rasterize,
    render,
    render_with_buffers,
    sample_texture,
    save_image,
    upsample_gradient,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
