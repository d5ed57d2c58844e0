"""Sequence-to-sequence degradation models (multi-task and single-task).

Architecture: masked input -> stacked bidirectional LSTM encoder -> hidden
vector ``c`` (last forward state ++ first-position backward state) -> ``c``
repeated ``output_len`` times -> one stacked bidirectional LSTM decoder per
branch -> per-timestep dense head ``2h -> h -> h/2 -> 1`` (tanh, linear out).

All parameters live in one flat float64 buffer; ``model.params[name]`` are
views into it so optimizers can work on the flat vector directly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..numeric import (DimensionError, LstmCellParams, NumericError, RegularizationSpec,
                       glorot_uniform, make_rng)
from .recurrent import streams_backward, streams_forward

BRANCHES = ("capacity", "resistance")
MIN_HISTORY_CYCLES = 100
SOH_C_FLOOR = 0.4
SOH_R_CEILING = 2.0


class ModelError(NumericError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_size: int = 64
    input_len: int = 384
    output_len: int = 128
    input_channels: int = 2
    in_step_cycles: int = 5
    out_step_cycles: int = 20
    head_sizes: tuple[int, ...] | None = None
    # fixed affine map between SOH units and network units: u = (soh - center) / scale
    soh_center: float = 1.0
    soh_scale: float = 0.1

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "input_len", "output_len",
                     "input_channels", "in_step_cycles", "out_step_cycles"):
            if int(getattr(self, name)) <= 0:
                raise ModelError(f"{name} must be > 0")
        if self.head_sizes is None:
            object.__setattr__(self, "head_sizes", (self.hidden_size, max(1, self.hidden_size // 2)))
        else:
            object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))
        if not self.soh_scale > 0:
            raise ModelError("soh_scale must be > 0")
        if self.input_len * self.in_step_cycles < MIN_HISTORY_CYCLES:
            raise ModelError("input window shorter than the minimum history")

    @property
    def max_history_cycles(self) -> int:
        return self.input_len * self.in_step_cycles

    @property
    def horizon_cycles(self) -> int:
        return self.output_len * self.out_step_cycles

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_sizes"] = list(self.head_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _layout(config: ModelConfig, branches: tuple[str, ...]) -> list[tuple[str, tuple[int, ...], bool]]:
    """(name, shape, is_weight_matrix) for every tensor, in storage order."""
    h = config.hidden_size
    out = []
    for l in range(config.num_layers):
        d = config.input_channels if l == 0 else 2 * h
        out += [(f"encoder.{l}.wx", (2, 4 * h, d), True),
                (f"encoder.{l}.wh", (2, 4 * h, h), True),
                (f"encoder.{l}.b", (2, 4 * h), False)]
    for br in branches:
        for l in range(config.num_layers):
            out += [(f"decoder.{br}.{l}.wx", (2, 4 * h, 2 * h), True),
                    (f"decoder.{br}.{l}.wh", (2, 4 * h, h), True),
                    (f"decoder.{br}.{l}.b", (2, 4 * h), False)]
        sizes = (2 * h, *config.head_sizes, 1)
        for k in range(len(sizes) - 1):
            out += [(f"head.{br}.w{k}", (sizes[k + 1], sizes[k]), True),
                    (f"head.{br}.b{k}", (sizes[k + 1],), False)]
    return out


class Seq2SeqModel:
    """Encoder shared by ``branches`` decoders. Two branches = MTL, one = STL."""

    def __init__(self, config: ModelConfig, branches=BRANCHES, reg: RegularizationSpec | None = None,
                 flat: np.ndarray | None = None, meta: dict | None = None):
        branches = tuple(branches)
        if not branches or any(b not in BRANCHES for b in branches) or len(set(branches)) != len(branches):
            raise ModelError(f"invalid branches {branches!r}")
        self.config = config
        self.branches = branches
        self.reg = reg or RegularizationSpec()
        self.meta = dict(meta or {})
        self.layout = _layout(config, branches)
        size = sum(int(np.prod(s)) for _, s, _ in self.layout)
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise DimensionError("flat parameters", (size,), flat.shape)
        self.flat = flat
        self.params: dict[str, np.ndarray] = {}
        self.slices: dict[str, slice] = {}
        pos = 0
        for name, shape, _ in self.layout:
            n = int(np.prod(shape))
            self.slices[name] = slice(pos, pos + n)
            self.params[name] = self.flat[pos:pos + n].reshape(shape)
            pos += n

    # -- bookkeeping -------------------------------------------------------
    @property
    def is_multitask(self) -> bool:
        return len(self.branches) > 1

    @property
    def num_parameters(self) -> int:
        return self.flat.size

    def copy(self) -> "Seq2SeqModel":
        return Seq2SeqModel(self.config, self.branches, self.reg, self.flat.copy(), self.meta)

    def set_flat(self, values: np.ndarray) -> None:
        self.flat[...] = values

    def group_mask(self, *groups: str) -> np.ndarray:
        """Boolean mask over ``flat`` for name prefixes such as ``"encoder"``,
        ``"decoder.capacity"`` or ``"head.resistance"``. ``"capacity"`` and
        ``"resistance"`` expand to decoder + head of that branch."""
        prefixes = []
        for g in groups:
            if g in BRANCHES:
                prefixes += [f"decoder.{g}.", f"head.{g}."]
            elif g == "all":
                prefixes.append("")
            else:
                prefixes.append(g)
        mask = np.zeros(self.flat.size, dtype=bool)
        for name, _, _ in self.layout:
            if any(name.startswith(p) for p in prefixes):
                mask[self.slices[name]] = True
        return mask

    def weight_mask(self) -> np.ndarray:
        mask = np.zeros(self.flat.size, dtype=bool)
        for name, _, is_w in self.layout:
            if is_w:
                mask[self.slices[name]] = True
        return mask

    def penalty(self) -> tuple[float, np.ndarray]:
        """L1/L2 penalty over weight matrices (biases excluded) and its flat gradient."""
        from ..numeric import regularization
        wm = self.weight_mask()
        pen, g = regularization(self.flat[wm], self.reg)
        grad = np.zeros_like(self.flat)
        grad[wm] = g
        return pen, grad

    def layer_cell(self, prefix: str, layer: int, direction: int) -> LstmCellParams:
        """Single-cell view (copy) of one direction of one layer, e.g. ``prefix="encoder"``."""
        p = self.params
        return LstmCellParams(p[f"{prefix}.{layer}.wx"][direction], p[f"{prefix}.{layer}.wh"][direction],
                              p[f"{prefix}.{layer}.b"][direction])


def init_model(config: ModelConfig, branches=BRANCHES, seed: int = 0,
               reg: RegularizationSpec | None = None) -> Seq2SeqModel:
    """Glorot-uniform weights, forget-gate biases 1, other biases 0."""
    model = Seq2SeqModel(config, branches, reg)
    rng = make_rng(seed, "init")
    h = config.hidden_size
    for name, shape, is_w in model.layout:
        arr = model.params[name]
        if name.endswith(".wx") or name.endswith(".wh"):
            fan_in = shape[2]
            for k in range(shape[0]):
                arr[k] = glorot_uniform(rng, shape[1:], fan_in, 4 * h)
        elif is_w:
            arr[...] = glorot_uniform(rng, shape, shape[1], shape[0])
        elif name.startswith("encoder") or name.startswith("decoder"):
            arr[...] = 0.0
            arr[:, h:2 * h] = 1.0
    return model


def mtl_model(config: ModelConfig | None = None, seed: int = 0, reg=None) -> Seq2SeqModel:
    return init_model(config or ModelConfig(), BRANCHES, seed, reg)


def stl_model(branch: str, config: ModelConfig | None = None, seed: int = 0, reg=None) -> Seq2SeqModel:
    config = config or ModelConfig(input_channels=1)
    if config.input_channels != 1:
        raise ModelError("single-task models take one input channel")
    return init_model(config, (branch,), seed, reg)


# ---------------------------------------------------------------------------
# batched forward / backward

@dataclass
class ForwardCache:
    branches: tuple[str, ...]
    enc: list = field(default_factory=list)
    dec: list = field(default_factory=list)
    heads: list = field(default_factory=list)
    t0: int = 0
    x_shape: tuple = ()


def _bidir_stack(xs: list[np.ndarray], masks: list[np.ndarray] | None):
    """Stack per-branch inputs (B, T, d) into forward/backward streams."""
    x = np.stack([a for xb in xs for a in (xb, xb[:, ::-1])])
    m = None if masks is None else np.stack([a for mb in masks for a in (mb, mb[:, ::-1])])
    return x, m


def _bidir_unstack(out: np.ndarray, nb: int) -> list[np.ndarray]:
    return [np.concatenate([out[2 * j], out[2 * j + 1][:, ::-1]], axis=-1) for j in range(nb)]


def _run_encoder(model: Seq2SeqModel, x: np.ndarray, mask: np.ndarray, cache: ForwardCache) -> np.ndarray:
    p = model.params
    cfg = model.config
    layer_in = np.where(mask[..., None], (x - cfg.soh_center) / cfg.soh_scale, 0.0)
    layer_mask = mask
    final = None
    for l in range(model.config.num_layers):
        xs, ms = _bidir_stack([layer_in], [layer_mask])
        out, final, c = streams_forward(p[f"encoder.{l}.wx"], p[f"encoder.{l}.wh"], p[f"encoder.{l}.b"], xs, ms)
        cache.enc.append(c)
        layer_in = _bidir_unstack(out, 1)[0]
    return np.concatenate([final[0], final[1]], axis=-1)


def _run_decoders(model: Seq2SeqModel, c: np.ndarray, branches, cache: ForwardCache) -> dict:
    """All requested decoders run fused as one set of 2*len(branches) streams."""
    p = model.params
    cfg = model.config
    nb = len(branches)
    T = cfg.output_len
    const = c[None, :, None, :]
    xs = np.broadcast_to(const, (2 * nb,) + const.shape[1:])
    ys = None
    for l in range(cfg.num_layers):
        wx = np.concatenate([p[f"decoder.{br}.{l}.wx"] for br in branches])
        wh = np.concatenate([p[f"decoder.{br}.{l}.wh"] for br in branches])
        b = np.concatenate([p[f"decoder.{br}.{l}.b"] for br in branches])
        if l > 0:
            xs, _ = _bidir_stack(ys, None)
        out, _, sc = streams_forward(wx, wh, b, xs, None, steps=T)
        cache.dec.append(sc)
        ys = _bidir_unstack(out, nb)
    outputs = {}
    for j, br in enumerate(branches):
        a = ys[j]
        acts = [a]
        n = len(cfg.head_sizes) + 1
        for k in range(n):
            a = a @ p[f"head.{br}.w{k}"].T + p[f"head.{br}.b{k}"]
            if k < n - 1:
                a = np.tanh(a)
            acts.append(a)
        cache.heads.append(acts)
        outputs[br] = cfg.soh_center + cfg.soh_scale * a[..., 0]
    return outputs


def forward_batch(model: Seq2SeqModel, x: np.ndarray, valid_from: np.ndarray, branches=None):
    """Batched forward pass.

    ``x`` is ``(B, input_len, channels)`` pre-padded; ``valid_from[b]`` is the
    first real timestep. Leading steps before the batch minimum are dropped,
    the rest are masked. Returns ``({branch: (B, output_len)}, cache)``.
    """
    branches = tuple(branches or model.branches)
    x = np.asarray(x, dtype=np.float64)
    valid_from = np.asarray(valid_from)
    B, T, C = x.shape
    if C != model.config.input_channels:
        raise DimensionError("x channels", model.config.input_channels, C)
    if np.any(valid_from >= T) or np.any(valid_from < 0):
        raise ModelError("empty input window")
    t0 = int(valid_from.min())
    xc = x[:, t0:]
    mask = np.arange(t0, T)[None, :] >= valid_from[:, None]
    cache = ForwardCache(branches, t0=t0, x_shape=x.shape)
    c = _run_encoder(model, xc, mask, cache)
    outputs = _run_decoders(model, c, branches, cache)
    return outputs, cache


def backward_batch(model: Seq2SeqModel, cache: ForwardCache, d_outputs: dict, encoder: bool = True) -> np.ndarray:
    """Gradient of sum_b <d_outputs[b], outputs[b]> w.r.t. the flat parameters.

    ``encoder=False`` skips BPTT through the encoder (its gradient stays zero).
    """
    p = model.params
    cfg = model.config
    grad = np.zeros_like(model.flat)

    def acc(name, g):
        grad[model.slices[name]] += g.reshape(-1)

    branches = cache.branches
    nb = len(branches)
    d_ys = []
    for j, br in enumerate(branches):
        acts = cache.heads[j]
        n = len(cfg.head_sizes) + 1
        d = cfg.soh_scale * np.asarray(d_outputs.get(br, 0.0) * np.ones(acts[-1].shape[:-1]))[..., None]
        for k in range(n - 1, -1, -1):
            a_in = acts[k]
            if k < n - 1:
                d = d * (1.0 - acts[k + 1] ** 2)
            acc(f"head.{br}.w{k}", np.einsum("bto,bti->oi", d, a_in))
            acc(f"head.{br}.b{k}", d.sum(axis=(0, 1)))
            d = d @ p[f"head.{br}.w{k}"]
        d_ys.append(d)

    h = cfg.hidden_size
    dc = None
    for l in range(cfg.num_layers - 1, -1, -1):
        d_out = np.stack([a for dy in d_ys for a in (dy[..., :h], dy[..., h:][:, ::-1])])
        dx, dwx, dwh, db = streams_backward(cache.dec[l], d_out)
        for j, br in enumerate(branches):
            s = slice(2 * j, 2 * j + 2)
            acc(f"decoder.{br}.{l}.wx", dwx[s])
            acc(f"decoder.{br}.{l}.wh", dwh[s])
            acc(f"decoder.{br}.{l}.b", db[s])
        if l > 0:
            d_ys = [dx[2 * j] + dx[2 * j + 1][:, ::-1] for j in range(nb)]
        else:
            dc = dx[:, :, 0].sum(axis=0)  # (B, 2h)

    if not encoder:
        return grad
    d_final = np.stack([dc[:, :h], dc[:, h:]])
    d_layer = None
    for l in range(cfg.num_layers - 1, -1, -1):
        if d_layer is None:
            dx, dwx, dwh, db = streams_backward(cache.enc[l], None, d_final)
        else:
            d_out = np.stack([d_layer[..., :h], d_layer[..., h:][:, ::-1]])
            dx, dwx, dwh, db = streams_backward(cache.enc[l], d_out)
        acc(f"encoder.{l}.wx", dwx)
        acc(f"encoder.{l}.wh", dwh)
        acc(f"encoder.{l}.b", db)
        d_layer = dx[0] + dx[1][:, ::-1]
    return grad


# ---------------------------------------------------------------------------
# single-sample API

@dataclass
class PaddedInput:
    values: np.ndarray  # (input_len,) one channel, leading zeros
    valid_from: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not 0 <= self.valid_from <= len(self.values):
            raise ModelError("valid_from out of range")
        if np.any(self.values[:self.valid_from] != 0.0):
            raise ModelError("padding region must be exactly zero")


@dataclass
class MaskedSequence:
    values: np.ndarray  # (T, channels)
    valid_from: int

    @property
    def valid(self) -> np.ndarray:
        return self.values[self.valid_from:]


@dataclass
class TrajectoryPrediction:
    capacity: np.ndarray | None
    resistance: np.ndarray | None
    start_cycle: int
    step_cycles: int = 20

    @property
    def cycles(self) -> np.ndarray:
        """Cycle index of each predicted point (first point one step after the present cycle)."""
        n = len(self.capacity if self.capacity is not None else self.resistance)
        return self.start_cycle + self.step_cycles * np.arange(1, n + 1)


def mask_and_concat(*channels: PaddedInput) -> MaskedSequence:
    if not channels:
        raise ModelError("no input channels")
    T = len(channels[0].values)
    vf = channels[0].valid_from
    for ch in channels[1:]:
        if len(ch.values) != T:
            raise ModelError("input channels have different lengths")
        if ch.valid_from != vf:
            raise ModelError("input channels have different valid_from")
    if vf >= T:
        raise ModelError("empty input window")
    return MaskedSequence(np.stack([ch.values for ch in channels], axis=-1), vf)


def encode(seq: MaskedSequence, model: Seq2SeqModel) -> np.ndarray:
    if seq.valid_from >= len(seq.values):
        raise ModelError("empty input window")
    x = seq.valid[None]
    cache = ForwardCache(model.branches)
    return _run_encoder(model, x, np.ones(x.shape[:2], dtype=bool), cache)[0]


def decode(c: np.ndarray, branch: str, model: Seq2SeqModel) -> np.ndarray:
    if branch not in model.branches:
        raise ModelError(f"unknown branch {branch!r}")
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (2 * model.config.hidden_size,):
        raise DimensionError("c", (2 * model.config.hidden_size,), c.shape)
    return _run_decoders(model, c[None], (branch,), ForwardCache((branch,)))[branch][0]


def resample_history(series: np.ndarray, step: int, max_len: int | None = None) -> np.ndarray:
    """Points at cycles present, present-step, ... (>= step), oldest first.

    With ``max_len`` only the most recent ``max_len`` points are kept, so the
    input window slides once the history outgrows it.
    """
    present = len(series) - 1
    n = present // step
    if max_len is not None:
        n = min(n, max_len)
    idx = present - step * np.arange(n - 1, -1, -1)
    return np.asarray(series, dtype=np.float64)[idx]


def pad_input(values: np.ndarray, input_len: int) -> PaddedInput:
    n = len(values)
    if n > input_len:
        raise ModelError(f"history needs {n} steps but the input window holds {input_len}")
    out = np.zeros(input_len)
    out[input_len - n:] = values
    return PaddedInput(out, input_len - n)


def check_history(n_cycles_present: int, config: ModelConfig) -> None:
    if n_cycles_present < MIN_HISTORY_CYCLES:
        raise ModelError(f"insufficient history: {n_cycles_present} cycles < {MIN_HISTORY_CYCLES}")
    if n_cycles_present > config.max_history_cycles:
        raise ModelError(f"history of {n_cycles_present} cycles exceeds the "
                         f"{config.max_history_cycles}-cycle input window")


def prepare_input(histories: list[np.ndarray], config: ModelConfig) -> MaskedSequence:
    """Resample cycle-indexed SOH histories (index 0..present) and pre-pad."""
    present = len(histories[0]) - 1
    if any(len(hh) != len(histories[0]) for hh in histories):
        raise ModelError("histories differ in length")
    check_history(present, config)
    return mask_and_concat(*[pad_input(resample_history(hh, config.in_step_cycles), config.input_len)
                             for hh in histories])


def clip_plausible(cap: np.ndarray | None, res: np.ndarray | None) -> int:
    """Length up to the first implausible point in either channel."""
    bad = np.zeros(len(cap if cap is not None else res), dtype=bool)
    if cap is not None:
        bad |= ~(cap >= SOH_C_FLOOR)
    if res is not None:
        bad |= ~(res <= SOH_R_CEILING)
    return int(np.argmax(bad)) if bad.any() else len(bad)


def predict(history_cap, history_res, model: Seq2SeqModel, clip: bool = True) -> TrajectoryPrediction:
    """One-shot trajectory forecast from normalized SOH-C / SOH-R histories.

    Histories are indexed by cycle starting at 0 and end at the present cycle.
    """
    if not model.is_multitask:
        raise ModelError("predict needs a multi-task model; use stl_predict")
    seq = prepare_input([history_cap, history_res], model.config)
    c = encode(seq, model)
    outs = _run_decoders(model, c[None], model.branches, ForwardCache(model.branches))
    cap, res = outs["capacity"][0], outs["resistance"][0]
    if clip:
        n = clip_plausible(cap, res)
        cap, res = cap[:n], res[:n]
    return TrajectoryPrediction(cap, res, len(history_cap) - 1, model.config.out_step_cycles)


def stl_predict(history, model: Seq2SeqModel, clip: bool = True) -> np.ndarray:
    if model.is_multitask or model.config.input_channels != 1:
        raise ModelError("stl_predict needs a single-task model")
    seq = prepare_input([history], model.config)
    br = model.branches[0]
    out = decode(encode(seq, model), br, model)
    if clip:
        out = out[:clip_plausible(out if br == "capacity" else None, out if br == "resistance" else None)]
    return out
