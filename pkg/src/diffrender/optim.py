"""Adam optimizer and the constrained sphere-deformation parameterization.

The deformation moves every vertex of a base icosphere by a per-vertex
bias plus one shared global bias, with each coordinate clamped to the
sign-octant of its base position before the global bias is added. Faces
never change.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Mesh

NADM_MAGIC = b"NADM"


@dataclass
class AdamState:
    """Moment accumulators for one named parameter block."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    name: str = "params"

    @classmethod
    def for_parameters(cls, parameters: np.ndarray, alpha: float = 1e-4,
                       beta1: float = 0.9, beta2: float = 0.999,
                       eps: float = 1e-8, name: str = "params") -> "AdamState":
        parameters = np.asarray(parameters, dtype=np.float64)
        return cls(m=np.zeros_like(parameters), v=np.zeros_like(parameters),
                   alpha=alpha, beta1=beta1, beta2=beta2, eps=eps, name=name)


def adam_step(
    state: AdamState, parameters: np.ndarray, gradients: np.ndarray
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected update; returns new parameters and state without
    mutating the inputs."""
    parameters = np.asarray(parameters, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if parameters.shape != state.m.shape or gradients.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch in block {state.name!r}: params {parameters.shape}, "
            f"grads {gradients.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(gradients)):
        raise FloatingPointError(f"non-finite gradient in block {state.name!r}")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradients
    v = state.beta2 * state.v + (1.0 - state.beta2) * gradients**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    updated = parameters - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, replace(state, m=m, v=v, t=t)


@dataclass
class SphereDeformation:
    """Base icosphere plus per-vertex and global bias vectors."""

    base: Mesh
    local_bias: np.ndarray = None
    global_bias: np.ndarray = None

    def __post_init__(self):
        if self.local_bias is None:
            self.local_bias = np.zeros_like(self.base.vertices)
        self.local_bias = np.asarray(self.local_bias, dtype=np.float64)
        if self.global_bias is None:
            self.global_bias = np.zeros(3)
        self.global_bias = np.asarray(self.global_bias, dtype=np.float64).reshape(3)
        if self.local_bias.shape != self.base.vertices.shape:
            raise ValueError(
                f"local bias shape {self.local_bias.shape} does not match "
                f"{self.base.vertices.shape} base vertices"
            )


def realize(deformation: SphereDeformation) -> Mesh:
    """Apply the biases: clamp each biased coordinate to the sign-octant of
    its base coordinate (zero base coordinates stay zero), then translate
    by the global bias. Faces are shared with the base mesh."""
    base = deformation.base.vertices
    moved = base + deformation.local_bias
    clamped = np.where(np.sign(moved) == np.sign(base), moved, 0.0)
    clamped = np.where(base == 0.0, 0.0, clamped)
    return Mesh(clamped + deformation.global_bias, deformation.base.faces,
                deformation.base.textures)


def realize_backward(
    deformation: SphereDeformation, d_vertices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of realize: the local-bias gradient passes through wherever
    the clamp is inactive (subgradient 0 at the boundary and where the base
    coordinate is zero); the global-bias gradient is the column sum."""
    d_vertices = np.asarray(d_vertices, dtype=np.float64)
    if d_vertices.shape != deformation.base.vertices.shape:
        raise ValueError(
            f"gradient shape {d_vertices.shape} does not match "
            f"{deformation.base.vertices.shape} vertices"
        )
    base = deformation.base.vertices
    moved = base + deformation.local_bias
    through = ((base > 0.0) & (moved > 0.0)) | ((base < 0.0) & (moved < 0.0))
    return np.where(through, d_vertices, 0.0), d_vertices.sum(axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_adam_checkpoint(state: AdamState, parameters: np.ndarray, path) -> None:
    """One block per file: magic "NADM", u32 step count, then the first
    moments, second moments, and parameters as little-endian float32."""
    parameters = np.asarray(parameters, dtype=np.float64)
    if parameters.shape != state.m.shape:
        raise ValueError("parameters do not match the optimizer state")
    with open(path, "wb") as fh:
        fh.write(NADM_MAGIC)
        fh.write(struct.pack("<I", state.t))
        for arr in (state.m, state.v, parameters):
            fh.write(arr.astype("<f4").tobytes())


def load_adam_checkpoint(path, shape, **hyper) -> tuple[AdamState, np.ndarray]:
    """Restore (state, parameters); the parameter shape is supplied by the
    caller, hyperparameters via keyword arguments."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != NADM_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {NADM_MAGIC!r}")
        (t,) = struct.unpack("<I", fh.read(4))
        data = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    count = int(np.prod(shape))
    if data.size != 3 * count:
        raise ValueError(
            f"{path}: expected {3 * count} floats for shape {shape}, "
            f"found {data.size}"
        )
    m, v, params = (seg.reshape(shape).copy() for seg in np.split(data, 3))
    return AdamState(m=m, v=v, t=t, **hyper), params
