"""CNN-LSTM velocity regressor with hand-written reverse-mode gradients."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ShapeError, StateError
from . import layers as L

MODEL_FORMAT_VERSION = 1
# Recorded once from the default architecture; guards silent shape drift.
DEFAULT_PARAM_COUNT = 213_977


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    batch_size: int = 12
    conv_layers: int = 3
    filters_per_layer: tuple = (32, 32, 32)
    kernel_size: int = 3
    dropout: float = 0.25
    activation: str = "tanh"
    bias_reg: float = 1e-4
    lstm_layers: int = 2
    lstm_units: tuple = (50, 50)
    seq_len_steps: int = 6
    outputs: int = 3

    def __post_init__(self):
        object.__setattr__(self, "filters_per_layer", tuple(int(f) for f in self.filters_per_layer))
        object.__setattr__(self, "lstm_units", tuple(int(u) for u in self.lstm_units))
        if self.conv_layers < 1 or len(self.filters_per_layer) != self.conv_layers:
            raise ValueError("filters_per_layer must list one count per conv layer")
        if self.lstm_layers < 1 or len(self.lstm_units) != self.lstm_layers:
            raise ValueError("lstm_units must list one count per LSTM layer")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation must be relu or tanh")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.outputs not in (1, 3):
            raise ValueError("outputs must be 1 or 3")
        if self.batch_size < 1 or self.seq_len_steps < 1:
            raise ValueError("batch_size and seq_len_steps must be positive")
        if self.learning_rate < 0 or self.bias_reg < 0:
            raise ValueError("learning_rate and bias_reg must be non-negative")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["filters_per_layer"] = list(self.filters_per_layer)
        d["lstm_units"] = list(self.lstm_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HyperParams:
        return cls(**d)


@dataclass
class Tape:
    """Everything ``backward`` needs from one training-mode forward pass."""

    conv: list
    drop_mask: object
    feat_shape: tuple
    seq_layout: tuple
    lstm: list
    lstm_masks: list
    dense: tuple
    first_layer: str


@dataclass
class CnnLstmModel:
    hyper: HyperParams
    input_shape: tuple = (17, 40, 40)      # channels, freqs, time columns
    rng_seed: int = 0
    dtype: type = np.float32
    params: dict = field(default=None, repr=False)
    _tape: Tape | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.params is None:
            self.params = self._init_params(np.random.default_rng(self.rng_seed))
        else:
            shapes = self.param_shapes()
            if list(self.params) != list(shapes):
                raise ShapeError("parameter names do not match the architecture")
            for name, shp in shapes.items():
                if self.params[name].shape != shp:
                    raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shp}")
            self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in self.params.items()}

    # -- architecture -------------------------------------------------------

    def feature_grid(self) -> tuple:
        _, h, w = self.input_shape
        for _ in range(self.hyper.conv_layers):
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ShapeError("input too small for the number of pooling stages")
        return h, w, self.hyper.filters_per_layer[-1]

    def param_shapes(self) -> dict:
        hp = self.hyper
        k = hp.kernel_size
        shapes = {}
        cin = self.input_shape[0]
        for i, f in enumerate(hp.filters_per_layer):
            shapes[f"conv{i}.w"] = (cin, k, k, f)
            shapes[f"conv{i}.b"] = (f,)
            cin = f
        h, w, c = self.feature_grid()
        d = h * w * c
        for i, u in enumerate(hp.lstm_units):
            shapes[f"lstm{i}.w"] = (d + u, 4 * u)
            shapes[f"lstm{i}.b"] = (4 * u,)
            d = u
        shapes["dense.w"] = (d, hp.outputs)
        shapes["dense.b"] = (hp.outputs,)
        return shapes

    def _init_params(self, rng) -> dict:
        out = {}
        for name, shp in self.param_shapes().items():
            if name.endswith(".b"):
                out[name] = np.zeros(shp, dtype=self.dtype)
            else:
                fan_in = int(np.prod(shp[:-1]))
                lim = np.sqrt(3.0 / fan_in)
                out[name] = rng.uniform(-lim, lim, shp).astype(self.dtype)
        return out

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def bias_names(self) -> list:
        return [n for n in self.params if n.endswith(".b")]

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, v in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    # -- forward ------------------------------------------------------------

    def _check_volumes(self, vols):
        vols = np.asarray(vols)
        if vols.ndim == 4:
            vols = vols[None]
        if vols.ndim != 5 or vols.shape[2:] != self.input_shape:
            raise ShapeError(f"expected (N, L, *{self.input_shape}), got {vols.shape}")
        if vols.shape[1] != self.hyper.seq_len_steps:
            raise ShapeError(f"sequence length {vols.shape[1]} != {self.hyper.seq_len_steps}")
        return vols

    def _cnn(self, x, first, train, rng, tape_conv):
        """Conv stack from the first-layer pre-activation ``x`` (N, H, W, F)."""
        hp = self.hyper
        p = self.params
        for i in range(hp.conv_layers):
            if i > 0:
                x, cc = L.conv2d_forward(x, p[f"conv{i}.w"], p[f"conv{i}.b"])
            else:
                cc = first
            x, ac = L.activation_forward(x, hp.activation)
            x, pc = L.maxpool2_forward(x)
            if tape_conv is not None:
                tape_conv.append((cc, ac, pc))
        return x

    def _run(self, pre0, first_cache, first_kind, n_win, layout, train, rng):
        """Shared tail: conv stack -> dropout -> flatten -> LSTM stack -> dense.

        ``layout`` is ``(B, nw)``: ``n_win = B * nw`` windows, grouped into
        segments of ``nw`` consecutive windows; every run of ``seq_len``
        consecutive windows inside a segment is one output sequence.
        """
        hp = self.hyper
        p = self.params
        conv_tape = [] if train else None
        x = self._cnn(pre0, first_cache, train, rng, conv_tape)
        feat_shape = x.shape
        feats = x.reshape(n_win, -1)
        mask = L.dropout_mask(feats.shape, hp.dropout, rng, self.dtype) if train else None
        feats, _ = L.dropout_forward(feats, mask)
        bsz, nw = layout
        seq = hp.seq_len_steps
        per = nw - seq + 1
        f3 = feats.reshape(bsz, nw, -1)
        idx = np.arange(per)[:, None] + np.arange(seq)
        h = f3[:, idx].reshape(bsz * per, seq, -1)
        lstm_tape, lstm_masks = [], []
        for i in range(hp.lstm_layers):
            if i > 0:
                m = L.dropout_mask(h.shape, hp.dropout, rng, self.dtype) if train else None
                h, _ = L.dropout_forward(h, m)
                lstm_masks.append(m)
            h, lc = L.lstm_forward(h, p[f"lstm{i}.w"], p[f"lstm{i}.b"])
            lstm_tape.append(lc)
        y, dc = L.dense_forward(h[:, -1], p["dense.w"], p["dense.b"])
        if train:
            self._tape = Tape(conv_tape, mask, feat_shape, (bsz, nw, per, h.shape[1]),
                              lstm_tape, lstm_masks, (dc, h.shape), first_kind)
        return y

    def forward(self, volumes, train: bool = False, rng=None) -> np.ndarray:
        """Outputs for ``(N, seq_len, C, F, T)`` volume sequences.

        Windows are processed independently through the conv stack; dropout
        is only active with ``train=True`` (masks drawn from ``rng``).
        """
        vols = self._check_volumes(volumes).astype(self.dtype, copy=False)
        n, seq = vols.shape[:2]
        x = vols.reshape(n * seq, *self.input_shape).transpose(0, 2, 3, 1)
        pre0, c0 = L.conv2d_forward(x, self.params["conv0.w"], self.params["conv0.b"])
        rng = rng if rng is not None else np.random.default_rng(0)
        return self._run(pre0, c0, "windows", n * seq, (n, seq), train, rng)

    def forward_strip(self, strip, train: bool = False, rng=None) -> np.ndarray:
        """Outputs for every sequence of windows along strips.

        ``strip`` is ``(B, C, F, S)``; each segment yields
        ``S - 40 - seq_len + 2`` outputs, the ``j``-th ending at column
        ``j + 40 + seq_len - 2``.
        """
        strip = np.asarray(strip, dtype=self.dtype)
        c, h, width = self.input_shape
        if strip.ndim != 4 or strip.shape[1:3] != (c, h):
            raise ShapeError(f"strip must be (B, {c}, {h}, S), got {strip.shape}")
        nw = strip.shape[3] - width + 1
        if nw < self.hyper.seq_len_steps:
            raise ShapeError("strip too short for one sequence")
        s = strip.transpose(0, 2, 3, 1)
        pre, cache = L.strip_conv_forward(s, self.params["conv0.w"], self.params["conv0.b"], width)
        bsz = s.shape[0]
        pre = pre.reshape(bsz * nw, h, width, -1)
        rng = rng if rng is not None else np.random.default_rng(0)
        return self._run(pre, cache, "strip", bsz * nw, (bsz, nw), train, rng)

    def window_features(self, windows) -> np.ndarray:
        """Eval-mode conv-stack features ``(N, D)`` for ``(N, C, F, T)`` windows."""
        x = np.asarray(windows, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected (N, *{self.input_shape}), got {x.shape}")
        x = x.transpose(0, 2, 3, 1)
        pre0, c0 = L.conv2d_forward(x, self.params["conv0.w"], self.params["conv0.b"])
        return self._cnn(pre0, c0, False, None, None).reshape(len(x), -1)

    def head(self, feats) -> np.ndarray:
        """Eval-mode LSTM stack and dense layer on ``(N, seq_len, D)`` features."""
        h = np.asarray(feats, dtype=self.dtype)
        for i in range(self.hyper.lstm_layers):
            h, _ = L.lstm_forward(h, self.params[f"lstm{i}.w"], self.params[f"lstm{i}.b"])
        y, _ = L.dense_forward(h[:, -1], self.params["dense.w"], self.params["dense.b"])
        return y

    # -- backward -----------------------------------------------------------

    def loss(self, y_pred, y_true) -> float:
        """MSE over samples and axes plus ``bias_reg * sum(b^2)``."""
        r = np.asarray(y_pred, dtype=np.float64) - np.asarray(y_true, dtype=np.float64)
        reg = sum(float(np.sum(np.asarray(self.params[n], dtype=np.float64) ** 2))
                  for n in self.bias_names())
        return float(np.mean(r * r) + self.hyper.bias_reg * reg)

    def backward(self, y_pred, y_true) -> dict:
        """Gradients of :meth:`loss` for the last training-mode forward."""
        tape = self._tape
        if tape is None:
            raise StateError("backward needs a preceding forward(train=True)")
        self._tape = None
        hp = self.hyper
        p = self.params
        y_true = np.asarray(y_true, dtype=self.dtype).reshape(y_pred.shape)
        dy = (2.0 / y_pred.size) * (y_pred - y_true)
        grads = {}
        dc, hshape = tape.dense
        dh_last, grads["dense.w"], grads["dense.b"] = L.dense_backward(dy, dc)
        dh = np.zeros(hshape, dtype=dy.dtype)
        dh[:, -1] = dh_last
        for i in reversed(range(hp.lstm_layers)):
            dh, grads[f"lstm{i}.w"], grads[f"lstm{i}.b"] = L.lstm_backward(dh, tape.lstm[i])
            if i > 0:
                dh = L.dropout_backward(dh, tape.lstm_masks[i - 1])
        bsz, nw, per, seq = tape.seq_layout
        dseq = dh.reshape(bsz, per, seq, -1)
        df3 = np.zeros((bsz, nw, dseq.shape[-1]), dtype=dh.dtype)
        for j in range(seq):
            df3[:, j:j + per] += dseq[:, :, j]
        dfeat = L.dropout_backward(df3.reshape(bsz * nw, -1), tape.drop_mask)
        dx = dfeat.reshape(tape.feat_shape)
        for i in reversed(range(hp.conv_layers)):
            cc, ac, pc = tape.conv[i]
            dx = L.maxpool2_backward(dx, pc)
            dx = L.activation_backward(dx, ac)
            if i > 0:
                dx, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = L.conv2d_backward(dx, cc)
            elif tape.first_layer == "strip":
                dpre = dx.reshape(bsz, nw, *dx.shape[1:])
                grads["conv0.w"], grads["conv0.b"] = L.strip_conv_backward(dpre, cc)
            else:
                _, grads["conv0.w"], grads["conv0.b"] = L.conv2d_backward(dx, cc)
        for name in self.bias_names():
            grads[name] = grads[name] + 2.0 * hp.bias_reg * p[name]
        return {k: grads[k] for k in p}

    # -- persistence --------------------------------------------------------

    def header(self) -> dict:
        return {"format_version": MODEL_FORMAT_VERSION, "hyper": self.hyper.as_dict(),
                "input_shape": list(self.input_shape), "seed": self.rng_seed,
                "dtype": np.dtype(self.dtype).newbyteorder("<").str,
                "params": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()]}

    def save(self, path, meta: dict | None = None) -> Path:
        path = Path(path)
        head = self.header()
        if meta:
            head["meta"] = dict(meta)
        with open(path, "wb") as fh:
            fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
            for v in self.params.values():
                fh.write(np.ascontiguousarray(v, dtype=head["dtype"]).tobytes())
        return path

    @classmethod
    def load(cls, path) -> CnnLstmModel:
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        head = json.loads(raw[:nl])
        if head.get("format_version") != MODEL_FORMAT_VERSION:
            raise ShapeError(f"unsupported model format {head.get('format_version')}")
        dt = np.dtype(head["dtype"])
        off = nl + 1
        params = {}
        for spec in head["params"]:
            count = int(np.prod(spec["shape"]))
            params[spec["name"]] = np.frombuffer(raw, dtype=dt, count=count,
                                                 offset=off).reshape(spec["shape"]).copy()
            off += count * dt.itemsize
        if off != len(raw):
            raise ShapeError("model file length does not match its header")
        return cls(HyperParams.from_dict(head["hyper"]), tuple(head["input_shape"]),
                   head["seed"], dt.type, params)
