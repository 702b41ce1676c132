"""
Cameras, relative poses and the view-neighborhood graph
=======================================================

Builds a ring of cameras, inspects per-pixel ray maps, and shows how the
window/dilation parameters shape each view's neighbor set.
"""

import numpy as np

from localsplat.geometry import (build_neighbor_graph, camera_center,
                                 local_ray_map, relative_pose)
from localsplat.scenes import arc_cameras

rng = np.random.default_rng(0)

# ten cameras on a jittered arc, all looking roughly at the origin
cameras = arc_cameras(rng, 10, resolution=32)
centers = np.stack([camera_center(c.pose) for c in cameras])
print("camera centers (first three):")
print(np.round(centers[:3], 3))

# every camera stores intrinsics; the local ray map depends on them only
rays = local_ray_map(cameras[0].intrinsics)
print("\nray map shape:", rays.shape, "| all unit length:",
      bool(np.allclose(np.linalg.norm(rays, axis=-1), 1.0)))
print("center pixel ray:", np.round(rays[16, 16], 4))

# relative pose between two views is what conditions the attention
rel = relative_pose(cameras[0].pose, cameras[1].pose)
print("\nrelative pose 0 <- 1 translation:", np.round(rel.translation, 3))

# the neighbor graph: each view attends to its `window` closest views
# (including itself), candidates strided by `dilation`
for window, dilation in ((3, 1), (5, 1), (3, 2)):
    graph = build_neighbor_graph(cameras, window, dilation)
    print(f"\nwindow={window} dilation={dilation}")
    for j in (0, 4, 9):
        print(f"  view {j} attends to {graph.of(j)}")
