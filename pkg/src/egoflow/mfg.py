"""Motion Field Generator: conv encoder, non-negative bottleneck, linear decoder.

The encoder maps a normalized-coordinate flow field to ``M`` non-negative
hidden activations ``h``.  Two bias-free decoder matrices map ``h`` to a
translational field (at unit inverse depth) and a rotational field, so
column ``m`` of each decoder is the basis motion field of neuron ``m``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import gradnet as gn
from .egosolver import recover_rotation, recover_translation
from .geometry import CameraModel, EgoMotion, check_flow, rotational_field, translational_field

log = logging.getLogger(__name__)

ACTIVE_THRESHOLD = 1e-6
# normalized flow is divided by this before entering the encoder
INPUT_SCALE = 0.1


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


def default_encoder(height: int, width: int, hidden: int) -> list[ConvSpec]:
    """Three stride-2 3x3 blocks, then one block whose kernel covers what is left."""
    specs = []
    h, w = height, width
    for ch in (16, 32, 64):
        if h < 4 or w < 4:
            break
        specs.append(ConvSpec(ch, (3, 3), (2, 2), (1, 1)))
        h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
    specs.append(ConvSpec(hidden, (h, w), (1, 1), (0, 0)))
    return specs


@dataclass(frozen=True)
class MfgConfig:
    width: int = 48
    height: int = 16
    hidden: int = 128
    encoder: tuple[ConvSpec, ...] | None = None
    sparsity_weight: float = 1e2
    lr: float = 1e-3
    beta1: float = 0.99
    beta2: float = 0.999
    logistic_q: float = 25.0
    logistic_steepness: float = 10.0
    grad_clip: float | None = 1000.0  # global-norm clip; None disables

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden layer needs at least one neuron")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")
        if self.encoder is None:
            object.__setattr__(self, "encoder",
                               tuple(default_encoder(self.height, self.width, self.hidden)))
        else:
            object.__setattr__(self, "encoder", tuple(self.encoder))
        h, w, c = self.height, self.width, 2
        for s in self.encoder:
            h = (h + 2 * s.padding[0] - s.kernel[0]) // s.stride[0] + 1
            w = (w + 2 * s.padding[1] - s.kernel[1]) // s.stride[1] + 1
            if h < 1 or w < 1:
                raise ValueError(f"encoder layer {s} does not fit the feature map")
            c = s.out_channels
        if (h, w, c) != (1, 1, self.hidden):
            raise ValueError(f"encoder must end in 1x1x{self.hidden}, got {h}x{w}x{c}")

    @property
    def n_outputs(self) -> int:
        return 2 * self.width * self.height


class MfgModel:
    def __init__(self, config: MfgConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D4647]))
        self.conv_w: list[np.ndarray] = []
        self.conv_b: list[np.ndarray] = []
        c = 2
        for s in config.encoder:
            kh, kw = s.kernel
            shape = (s.out_channels, c, kh, kw)
            self.conv_w.append(gn.glorot_uniform(rng, shape, c * kh * kw, s.out_channels * kh * kw))
            self.conv_b.append(np.zeros(s.out_channels))
            c = s.out_channels
        n, m = config.n_outputs, config.hidden
        self.dec_t = gn.glorot_uniform(rng, (n, m), m, n)
        self.dec_w = gn.glorot_uniform(rng, (n, m), m, n)

    # parameter plumbing --------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out.append((f"encoder.{i}.weight", w))
            out.append((f"encoder.{i}.bias", b))
        out.append(("decoder.translation", self.dec_t))
        out.append(("decoder.rotation", self.dec_w))
        return out

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def copy(self) -> "MfgModel":
        other = MfgModel.__new__(MfgModel)
        other.config = self.config
        other.conv_w = [w.copy() for w in self.conv_w]
        other.conv_b = [b.copy() for b in self.conv_b]
        other.dec_t = self.dec_t.copy()
        other.dec_w = self.dec_w.copy()
        return other

    def zero_(self) -> None:
        for p in self.parameters():
            p[...] = 0.0

    # graph construction ----------------------------------------------------------
    def _graph(self, flow: np.ndarray):
        cfg = self.config
        flow = check_flow(flow)
        if flow.shape[:2] != (cfg.height, cfg.width):
            raise ValueError(f"flow shape {flow.shape[:2]} != model input "
                             f"{(cfg.height, cfg.width)}")
        params = {name: gn.parameter(p, name) for name, p in self.named_parameters()}
        x = gn.constant(np.transpose(flow, (2, 0, 1)) / INPUT_SCALE)
        for i, s in enumerate(cfg.encoder):
            x = gn.relu(gn.conv2d(x, params[f"encoder.{i}.weight"], params[f"encoder.{i}.bias"],
                                  s.stride, s.padding))
        h = gn.reshape(x, (cfg.hidden,))
        vt = gn.matvec(params["decoder.translation"], h)
        vw = gn.matvec(params["decoder.rotation"], h)
        return params, h, vt, vw

    def forward(self, flow: np.ndarray):
        """Return ``(v_t, v_omega, h)`` with fields shaped ``(H, W, 2)``."""
        _, h, vt, vw = self._graph(flow)
        return self._field(vt.value), self._field(vw.value), h.value

    def encode(self, flow: np.ndarray) -> np.ndarray:
        return self.forward(flow)[2]

    def decode(self, h: np.ndarray):
        h = np.asarray(h, dtype=np.float64).reshape(self.config.hidden)
        return self._field(self.dec_t @ h), self._field(self.dec_w @ h)

    def _field(self, flat: np.ndarray) -> np.ndarray:
        return flat.reshape(self.config.height, self.config.width, 2)

    # checkpoint ----------------------------------------------------------------
    def to_tensors(self, camera: CameraModel | None = None) -> list[tuple[str, np.ndarray]]:
        cfg = self.config
        meta = [("meta.input", np.array([cfg.height, cfg.width, cfg.hidden], dtype=float))]
        for i, s in enumerate(cfg.encoder):
            meta.append((f"meta.encoder.{i}", np.array(
                [s.out_channels, *s.kernel, *s.stride, *s.padding], dtype=float)))
        if camera is not None:
            meta.append(("meta.camera", np.array([camera.f, camera.cx, camera.cy])))
        return meta + self.named_parameters()

    @classmethod
    def from_tensors(cls, tensors: Iterable[tuple[str, np.ndarray]],
                     **config_overrides) -> tuple["MfgModel", CameraModel | None]:
        d = dict(tensors)
        try:
            H, W, M = (int(v) for v in d["meta.input"])
            specs = []
            i = 0
            while f"meta.encoder.{i}" in d:
                o, kh, kw, sh, sw, ph, pw = (int(v) for v in d[f"meta.encoder.{i}"])
                specs.append(ConvSpec(o, (kh, kw), (sh, sw), (ph, pw)))
                i += 1
            cfg = MfgConfig(width=W, height=H, hidden=M, encoder=tuple(specs), **config_overrides)
            model = cls.__new__(cls)
            model.config = cfg
            model.conv_w = [d[f"encoder.{j}.weight"].copy() for j in range(len(specs))]
            model.conv_b = [d[f"encoder.{j}.bias"].copy() for j in range(len(specs))]
            model.dec_t = d["decoder.translation"].copy()
            model.dec_w = d["decoder.rotation"].copy()
        except (KeyError, ValueError, TypeError) as e:
            raise gn.CheckpointError(f"checkpoint does not describe an MFG model: {e}") from e
        fresh = MfgModel(cfg)
        for (name, got), (_, want) in zip(model.named_parameters(), fresh.named_parameters()):
            if got.shape != want.shape:
                raise gn.CheckpointError(f"{name}: shape {got.shape} != expected {want.shape}")
        camera = None
        if "meta.camera" in d:
            f, cx, cy = d["meta.camera"]
            camera = CameraModel(float(f), float(cx), float(cy), W, H)
        return model, camera


# --- losses ---------------------------------------------------------------------

def prediction_losses(pred_t, pred_w, gt_t, gt_w) -> tuple[float, float]:
    """L1 distance summed over pixels and both flow components."""
    lt = float(np.sum(np.abs(np.asarray(gt_t) - np.asarray(pred_t))))
    lw = float(np.sum(np.abs(np.asarray(gt_w) - np.asarray(pred_w))))
    return lt, lw


def loss_weights(v_t: np.ndarray, v_w: np.ndarray, floor: float = 1e-12) -> tuple[float, float]:
    nt = max(float(np.sum(np.square(v_t))), floor)
    nw = max(float(np.sum(np.square(v_w))), floor)
    return max(nw / nt, 1.0), max(nt / nw, 1.0)


def sparsity_loss(h: np.ndarray, q: float = 25.0, steepness: float = 10.0) -> float:
    return float(np.sum(gn.logistic_value(h, q, steepness)))


def gt_fields(ego: EgoMotion, cam: CameraModel):
    return translational_field(ego.t, cam), rotational_field(ego.omega, cam)


@dataclass
class LossTerms:
    total: float
    l_t: float
    l_w: float
    l_s: float
    w_t: float
    w_w: float
    active: int


def loss_graph(model: MfgModel, flow: np.ndarray, v_t: np.ndarray, v_w: np.ndarray):
    """Build the full training loss; returns ``(params, loss tensor, LossTerms)``."""
    cfg = model.config
    params, h, pt, pw = model._graph(flow)
    w_t, w_w = loss_weights(v_t, v_w)
    lt = gn.l1_distance(pt, gn.constant(np.asarray(v_t).reshape(-1)))
    lw = gn.l1_distance(pw, gn.constant(np.asarray(v_w).reshape(-1)))
    ls = gn.sum_(gn.generalized_logistic(h, cfg.logistic_q, cfg.logistic_steepness))
    total = gn.add(gn.add(gn.scale(lt, w_t), gn.scale(lw, w_w)), gn.scale(ls, cfg.sparsity_weight))
    terms = LossTerms(float(total.value), float(lt.value), float(lw.value), float(ls.value),
                      w_t, w_w, int(np.sum(h.value > ACTIVE_THRESHOLD)))
    return params, total, terms


def total_loss(model: MfgModel, flow: np.ndarray, ego: EgoMotion, cam: CameraModel) -> float:
    v_t, v_w = gt_fields(ego, cam)
    return loss_graph(model, flow, v_t, v_w)[2].total


def loss_and_grads(model: MfgModel, flow, v_t, v_w):
    params, total, terms = loss_graph(model, flow, v_t, v_w)
    total.backward()
    grads = [params[name].grad for name, _ in model.named_parameters()]
    return terms, grads


# --- training ---------------------------------------------------------------------

@dataclass
class TrainSample:
    flow: np.ndarray
    ego: EgoMotion


@dataclass
class EpochLog:
    epoch: int
    l_t: float
    l_w: float
    l_s: float
    active: float


def train(model: MfgModel, samples: Sequence[TrainSample], cam: CameraModel,
          epochs: int, seed: int = 0, callback=None) -> tuple[MfgModel, list[EpochLog]]:
    """Adam with batch size 1 and a seeded per-epoch shuffle; returns a new model."""
    if not samples:
        raise ValueError("training needs at least one sample")
    if cam.shape != (model.config.height, model.config.width):
        raise ValueError("camera does not match model input size")
    model = model.copy()
    cfg = model.config
    state = gn.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    targets = [gt_fields(s.ego, cam) for s in samples]
    params = model.parameters()
    history = []
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5348]))
        order = rng.permutation(len(samples))
        sums = np.zeros(4)
        count = 0
        for i in order:
            v_t, v_w = targets[i]
            if not np.any(v_t) and not np.any(v_w):
                continue
            terms, grads = loss_and_grads(model, samples[i].flow, v_t, v_w)
            if cfg.grad_clip is not None:
                clip_global_norm(grads, cfg.grad_clip)
            gn.adam_step(params, grads, state)
            sums += (terms.l_t, terms.l_w, terms.l_s, terms.active)
            count += 1
        mean = sums / max(count, 1)
        entry = EpochLog(epoch, *mean)
        history.append(entry)
        log.info("epoch %d L_t=%.6g L_w=%.6g L_s=%.6g active=%.3g", epoch, *mean)
        if callback is not None:
            callback(entry, model)
    return model, history


def clip_global_norm(grads, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))
    if norm > max_norm:
        for g in grads:
            if g is not None:
                g *= max_norm / norm
    return norm


def write_loss_csv(history: Sequence[EpochLog], stream) -> None:
    stream.write("epoch,L_t,L_w,L_s,active_count\n")
    for e in history:
        stream.write(f"{e.epoch},{e.l_t:.9g},{e.l_w:.9g},{e.l_s:.9g},{e.active:.9g}\n")


# --- inference ----------------------------------------------------------------------

def topk_mask(h: np.ndarray, k: float) -> np.ndarray:
    """Keep the ceil(k% of M) largest activations, ties going to lower indices."""
    if not 0 < k <= 100:
        raise ValueError(f"k must be in (0, 100], got {k}")
    h = np.asarray(h, dtype=np.float64)
    keep = int(np.ceil(k * h.size / 100.0 - 1e-9))
    keep = min(max(keep, 1), h.size)
    order = np.lexsort((np.arange(h.size), -h))
    out = np.zeros_like(h)
    idx = order[:keep]
    out[idx] = h[idx]
    return out


def decode_basis(model: MfgModel, m: int):
    if not 0 <= m < model.config.hidden:
        raise IndexError(f"neuron {m} out of range [0, {model.config.hidden})")
    return model._field(model.dec_t[:, m].copy()), model._field(model.dec_w[:, m].copy())


def predict_fields(model: MfgModel, flow: np.ndarray, k: float | None = None):
    _, _, h = model.forward(flow)
    if k is not None:
        h = topk_mask(h, k)
    v_t, v_w = model.decode(h)
    return v_t, v_w, h


def predict_egomotion(model: MfgModel, flow: np.ndarray, cam: CameraModel,
                      k: float | None = None) -> EgoMotion:
    v_t, v_w, _ = predict_fields(model, flow, k)
    return EgoMotion(recover_translation(v_t, cam), recover_rotation(v_w, cam))


def with_overrides(config: MfgConfig, **kw) -> MfgConfig:
    return replace(config, **kw)
