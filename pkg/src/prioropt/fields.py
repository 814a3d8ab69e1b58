"""Hypernetwork prior and the implicit child networks it generates.

A latent code ``z`` goes through a two-layer perceptron (layer norm before
each ReLU) whose linear output is the flat parameter vector ``phi`` of a
child MLP. The child has a shared ReLU trunk with one skip connection and
two heads: a raw scalar for signed distance and a sigmoid RGB color.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_autodiff as ad
from .tensor_autodiff import Dual, Tensor

_SKIP_SCALE = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class FieldArch:
    trunk_layers: int = 9
    hidden_width: int = 256
    skip_at: int = 4
    pe_frequencies: int = 0
    latent_dim: int = 256
    hyper_width: int = 256
    geo_init_radius: float = 0.5
    hyper_out_scale: float = 0.05
    sdf_clamp: float | None = None

    def __post_init__(self):
        if not 0 < self.skip_at < self.trunk_layers:
            raise ValueError(f"skip_at must lie in (0, {self.trunk_layers}), got {self.skip_at}")
        if self.pe_frequencies < 0:
            raise ValueError("pe_frequencies must be >= 0")

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.pe_frequencies

    def child_layout(self) -> "ParamLayout":
        entries = []
        width = self.hidden_width
        for i in range(self.trunk_layers):
            fan_in = self.input_dim if i == 0 else width
            if i == self.skip_at:
                fan_in = width + self.input_dim
            entries += [(f"trunk{i}.w", (fan_in, width)), (f"trunk{i}.b", (width,))]
        entries += [("geo.w", (width, 1)), ("geo.b", (1,)),
                    ("tex.w", (width, 3)), ("tex.b", (3,))]
        return ParamLayout(entries)

    def hyper_layout(self) -> "ParamLayout":
        hw = self.hyper_width
        n_phi = self.child_layout().size
        return ParamLayout([
            ("h1.w", (self.latent_dim, hw)), ("h1.b", (hw,)), ("h1.gain", (hw,)), ("h1.bias", (hw,)),
            ("h2.w", (hw, hw)), ("h2.b", (hw,)), ("h2.gain", (hw,)), ("h2.bias", (hw,)),
            ("out.w", (hw, n_phi)), ("out.b", (n_phi,)),
        ])


class ParamLayout:
    """Named, shaped slices of one flat parameter vector."""

    def __init__(self, entries):
        self.entries = list(entries)
        self.offsets = {}
        off = 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            self.offsets[name] = (off, off + n, tuple(shape))
            off += n
        self.size = off

    def split(self, flat):
        """Per-entry views of ``flat`` (array or Tensor); leading batch axes are kept."""
        out = {}
        for name, (a, b, shape) in self.offsets.items():
            if isinstance(flat, Tensor):
                out[name] = ad.reshape(flat[..., a:b], flat.shape[:-1] + shape)
            else:
                out[name] = flat[..., a:b].reshape(flat.shape[:-1] + shape)
        return out

    def concat(self, parts: dict) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name]).reshape(-1) for name, _ in self.entries])


def init_child_params(arch: FieldArch, rng: np.random.Generator) -> np.ndarray:
    """Geometric initialization: the child starts near a sphere SDF."""
    layout = arch.child_layout()
    parts = {}
    w = arch.hidden_width
    for i in range(arch.trunk_layers):
        a, b, shape = layout.offsets[f"trunk{i}.w"]
        W = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(w), size=shape)
        if i == 0 and arch.pe_frequencies:
            W[3:] = 0.0
        if i == arch.skip_at and arch.pe_frequencies:
            W[w + 3:] = 0.0
        parts[f"trunk{i}.w"] = W
        parts[f"trunk{i}.b"] = np.zeros(w)
    parts["geo.w"] = rng.normal(math.sqrt(math.pi) / math.sqrt(w), 1e-4, size=(w, 1))
    parts["geo.b"] = np.array([-arch.geo_init_radius])
    parts["tex.w"] = rng.normal(0.0, 1.0 / math.sqrt(w), size=(w, 3))
    parts["tex.b"] = np.zeros(3)
    return layout.concat(parts)


def init_hyper_params(arch: FieldArch, rng: np.random.Generator) -> np.ndarray:
    layout = arch.hyper_layout()
    hw = arch.hyper_width
    parts = {
        "h1.w": rng.normal(0.0, math.sqrt(2.0 / arch.latent_dim), size=(arch.latent_dim, hw)),
        "h1.b": np.zeros(hw), "h1.gain": np.ones(hw), "h1.bias": np.zeros(hw),
        "h2.w": rng.normal(0.0, math.sqrt(2.0 / hw), size=(hw, hw)),
        "h2.b": np.zeros(hw), "h2.gain": np.ones(hw), "h2.bias": np.zeros(hw),
    }
    n_phi = layout.offsets["out.b"][2][0]
    parts["out.w"] = rng.normal(0.0, arch.hyper_out_scale / math.sqrt(hw), size=(hw, n_phi))
    parts["out.b"] = init_child_params(arch, rng)
    return layout.concat(parts)


def init_latent(dim: int, rng: np.random.Generator, std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=dim)


@dataclass
class HyperPrior:
    arch: FieldArch
    theta: np.ndarray
    theta0: np.ndarray | None = None
    codebook: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        n = self.arch.hyper_layout().size
        if self.theta.shape != (n,):
            raise ValueError(f"theta has {self.theta.size} entries, arch needs {n}")
        if self.theta0 is not None and self.theta0.shape != self.theta.shape:
            raise ValueError("theta0 length differs from theta")

    @classmethod
    def initialize(cls, arch: FieldArch, seed: int = 0) -> "HyperPrior":
        return cls(arch, init_hyper_params(arch, np.random.default_rng(seed)))

    def freeze(self) -> None:
        """Snapshot the current parameters as the reference prior."""
        self.theta0 = self.theta.copy()

    def clone(self) -> "HyperPrior":
        return HyperPrior(self.arch, self.theta.copy(),
                          None if self.theta0 is None else self.theta0.copy(),
                          {k: v.copy() for k, v in self.codebook.items()})


# ------------------------------------------------------------------ forward

def positional_encode(p, L: int):
    """Prepend raw coordinates to ``sin/cos(2^k pi p)`` for k < L.

    Accepts a :class:`Dual` (tangents are carried) or an array/Tensor.
    """
    if L < 0:
        raise ValueError("number of frequencies must be >= 0")
    dual_in = isinstance(p, Dual)
    p = ad.lift(p)
    if L == 0:
        return p if dual_in else p.primal
    parts = [p]
    for k in range(L):
        scaled = p * (2.0 ** k * math.pi)
        parts += [ad.d_sin(scaled), ad.d_cos(scaled)]
    out = ad.d_concat(parts, axis=-1)
    return out if dual_in else out.primal


def hyper_forward(arch: FieldArch, theta, z) -> Tensor:
    """Child parameters ``phi = h(z; theta)``; ``z`` may carry a batch axis."""
    theta, z = ad.as_tensor(theta), ad.as_tensor(z)
    if z.shape[-1] != arch.latent_dim:
        raise ValueError(f"latent code has dimension {z.shape[-1]}, prior expects {arch.latent_dim}")
    P = arch.hyper_layout().split(theta)
    h = z @ P["h1.w"] + P["h1.b"]
    h = ad.relu(ad.layer_norm(h, P["h1.gain"], P["h1.bias"]))
    h = h @ P["h2.w"] + P["h2.b"]
    h = ad.relu(ad.layer_norm(h, P["h2.gain"], P["h2.bias"]))
    return h @ P["out.w"] + P["out.b"]


class ImplicitField:
    """Child networks realized from one parameter vector ``phi``.

    With a batched ``phi`` of shape ``(B, n)`` the points must be ``(B, N, 3)``.
    """

    def __init__(self, arch: FieldArch, phi):
        self.arch = arch
        self.phi = ad.as_tensor(phi)
        self.batched = self.phi.ndim == 2
        parts = arch.child_layout().split(self.phi)
        if self.batched:
            # biases broadcast against (B, N, width)
            parts = {k: (ad.reshape(v, (v.shape[0], 1, v.shape[1])) if k.endswith(".b") else v)
                     for k, v in parts.items()}
        self.params = parts

    def trunk(self, p) -> Dual:
        enc = positional_encode(ad.lift(p), self.arch.pe_frequencies)
        h = enc
        for i in range(self.arch.trunk_layers):
            if i == self.arch.skip_at:
                h = ad.d_concat([h, enc], axis=-1) * _SKIP_SCALE
            h = ad.d_relu(h @ self.params[f"trunk{i}.w"] + self.params[f"trunk{i}.b"])
        return h

    def geo_head(self, feat: Dual) -> Dual:
        s = (feat @ self.params["geo.w"] + self.params["geo.b"])[..., 0]
        if self.arch.sdf_clamp is not None:
            s = ad.d_clamp(s, -self.arch.sdf_clamp, self.arch.sdf_clamp)
        return s

    def tex_head(self, feat: Dual) -> Tensor:
        return ad.sigmoid(feat.primal @ self.params["tex.w"] + self.params["tex.b"])

    def geo(self, p) -> Dual:
        return self.geo_head(self.trunk(p))

    def tex(self, p) -> Tensor:
        return self.tex_head(self.trunk(Dual(ad.as_tensor(p))))

    def geo_tex(self, p) -> tuple[Dual, Tensor]:
        feat = self.trunk(p)
        return self.geo_head(feat), self.tex_head(feat)


def instantiate(arch: FieldArch, theta, z) -> ImplicitField:
    return ImplicitField(arch, hyper_forward(arch, theta, z))


def _chunked(fn, p: np.ndarray, chunk: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    flat = p.reshape(-1, 3)
    out = [fn(flat[i:i + chunk]) for i in range(0, len(flat), chunk)]
    out = np.concatenate(out, axis=0) if out else np.zeros((0,) + fn(flat[:1]).shape[1:])
    return out.reshape(p.shape[:-1] + out.shape[1:])


def eval_geo(prior: HyperPrior, z, p, chunk: int = 65536) -> np.ndarray:
    f = instantiate(prior.arch, prior.theta, z)
    return _chunked(lambda q: f.geo(Dual(Tensor(q))).primal.data, p, chunk)


def eval_tex(prior: HyperPrior, z, p, chunk: int = 65536) -> np.ndarray:
    f = instantiate(prior.arch, prior.theta, z)
    return _chunked(lambda q: f.tex(q).data, p, chunk)


def surface_normal(field_fn, p, mode: str = "analytic", eps: float = 1e-12):
    """Unit normals of a field plus a per-point degenerate flag.

    ``field_fn`` maps a Dual of points to a Dual of values (for example
    ``ImplicitField.geo``). Degenerate points get a zero normal.
    """
    _, g = ad.spatial_gradient(field_fn, p, mode=mode)
    norm = np.linalg.norm(g.data, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < eps
    n = np.where(degenerate[..., None], 0.0, g.data / np.where(norm < eps, 1.0, norm))
    return n, degenerate


def prior_normals(prior: HyperPrior, z, p, mode: str = "analytic"):
    f = instantiate(prior.arch, prior.theta, z)
    return surface_normal(f.geo, p, mode=mode)


# --------------------------------------------------------------- checkpoint

def save_checkpoint(prior: HyperPrior, path) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian blob)."""
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = [("theta", prior.theta)]
    if prior.theta0 is not None:
        arrays.append(("theta0", prior.theta0))
    for key in sorted(prior.codebook):
        arrays.append((f"code/{key}", np.asarray(prior.codebook[key])))
    table = {}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays:
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            table[name] = {"shape": list(arr.shape), "dtype": "float64", "offset": offset}
            fh.write(blob)
            offset += len(blob)
    manifest = {"arch": asdict(prior.arch), "d_z": prior.arch.latent_dim,
                "blob": path.with_suffix(".bin").name, "tensors": table}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_checkpoint(path) -> HyperPrior:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    manifest = json.loads(path.read_text())
    raw = (path.parent / manifest["blob"]).read_bytes()

    def read(entry):
        n = int(np.prod(entry["shape"]))
        return np.frombuffer(raw, dtype="<f8", count=n, offset=entry["offset"]).reshape(entry["shape"]).copy()

    tensors = manifest["tensors"]
    prior = HyperPrior(FieldArch(**manifest["arch"]), read(tensors["theta"]),
                       read(tensors["theta0"]) if "theta0" in tensors else None)
    for name, entry in tensors.items():
        if name.startswith("code/"):
            prior.codebook[name[5:]] = read(entry)
    return prior
