"""Dev-only probe for cube-fit tuning (not part of the test suite)."""
import sys
import time

import numpy as np

from diffrender import *


def cube_mesh(h):
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    f = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
        [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return Mesh(v, f)


def run(h, elevations, batch, steps=2000, seed=0, alpha=1e-4):
    cube = cube_mesh(h)
    opts = RenderOptions(image_size=64, mode="silhouette")
    vps = [Viewpoint(az, el, 2.732, 60)
           for az, el in zip(np.arange(24) * 15.0, elevations)]
    targets = [render(cube, vp, opts) for vp in vps]
    deform = SphereDeformation(generate_icosphere(3))
    st_b = AdamState.for_parameters(deform.local_bias, alpha=alpha, name="b")
    st_c = AdamState.for_parameters(deform.global_bias, alpha=alpha, name="c")
    rng = np.random.default_rng(seed)

    def mean_iou(mesh):
        tot = 0
        for vp, t in zip(vps, targets):
            p = render(mesh, vp, opts)
            tot += np.sum((p > .5) & (t > .5)) / np.sum((p > .5) | (t > .5))
        return tot / len(vps)

    t0 = time.time()
    for step in range(steps):
        mesh = realize(deform)
        idx = rng.choice(len(vps), size=batch, replace=False)
        d_obj = np.zeros_like(mesh.vertices)
        for i in idx:
            pred = render(mesh, vps[i], opts)
            lv = silhouette_loss(pred, targets[i])
            _, d = backward_render(mesh, vps[i], opts, lv.gradient)
            d_obj += d / batch
        d_b, d_c = realize_backward(deform, d_obj)
        deform.local_bias, st_b = adam_step(st_b, deform.local_bias, d_b)
        deform.global_bias, st_c = adam_step(st_c, deform.global_bias, d_c)
        if step % 500 == 499 or step == steps - 1:
            print(f"  h={h} batch={batch} step {step + 1}: "
                  f"IoU={mean_iou(realize(deform)):.4f} t={time.time() - t0:.0f}s",
                  flush=True)
    return mean_iou(realize(deform))


if __name__ == "__main__":
    h = float(sys.argv[1])
    batch = int(sys.argv[2])
    elev_mode = sys.argv[3]
    if elev_mode == "alt":
        elevations = [30.0 if i % 2 == 0 else -30.0 for i in range(24)]
    elif elev_mode == "fixed":
        elevations = [30.0] * 24
    else:
        elevations = list(np.tile([50.0, 20.0, -10.0, -40.0], 6))
    final = run(h, elevations, batch)
    print(f"FINAL h={h} batch={batch} elev={elev_mode}: {final:.4f}")
