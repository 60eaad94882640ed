"""Two-tower residual encoder, fully connected mel decoder and CBHG post-net."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Node
from .fileio import FormatError, parse_tensor_body

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"V2SM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    K: int = 9
    H: int = 160
    W: int = 128
    stem_width: int = 128
    block_widths: tuple = (128, 128, 256, 256, 256, 256, 512, 512, 512, 512)
    block_strides: tuple = (2, 2, 1, 2, 1, 2, 1, 2, 1, 1)
    decoder_widths: tuple = (1024, 1024)
    n_mels: int = 80
    l: int = 4
    T: int = 8
    d_lin: int = 513
    use_pixels: bool = True
    use_flow: bool = True
    use_postnet: bool = True
    bank_size: int = 8
    bank_channels: int = 128
    projection_width: int = 256
    highway_layers: int = 4
    highway_width: int = 128
    gru_width: int = 128
    leaky_alpha: float = 0.3

    def __post_init__(self):
        if not (self.use_pixels or self.use_flow):
            raise ValueError("at least one of use_pixels/use_flow must be enabled")
        if len(self.block_widths) != len(self.block_strides):
            raise ValueError("block_widths and block_strides differ in length")
        if self.use_flow and self.K < 2:
            raise ValueError("the flow tower needs K >= 2")

    @property
    def towers(self) -> list[str]:
        return [t for t, on in (("pix", self.use_pixels), ("flow", self.use_flow)) if on]

    def tower_widths(self) -> tuple:
        widths = list(self.block_widths)
        if len(self.towers) == 1:
            widths[-1] *= 2
        return tuple(widths)

    @property
    def embedding_size(self) -> int:
        return self.tower_widths()[-1] * len(self.towers)

    @property
    def mel_block_size(self) -> int:
        return self.n_mels * self.l

    def in_channels(self, tower: str) -> int:
        return self.K if tower == "pix" else 2 * (self.K - 1)

    def prepool_shape(self) -> tuple[int, int]:
        h, w = self.H, self.W
        for s in self.block_strides:
            h, w = -(-h // s), -(-w // s)
        return h, w

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(
            K=3, H=16, W=16, stem_width=4, block_widths=(4, 8), block_strides=(2, 2), decoder_widths=(16, 16),
            n_mels=8, l=2, T=4, d_lin=17, bank_size=2, bank_channels=4, projection_width=8,
            highway_layers=2, highway_width=8, gru_width=4,
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def mini(cls, **kw) -> "ModelConfig":
        base = dict(
            K=5, H=40, W=32, stem_width=8, block_widths=(8, 16, 32), block_strides=(2, 2, 2), decoder_widths=(128, 128),
            n_mels=80, l=4, T=4, d_lin=513, bank_size=4, bank_channels=16, projection_width=32,
            highway_layers=2, highway_width=32, gru_width=16,
        )
        base.update(kw)
        return cls(**base)


def config_to_text(cfg) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_value(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        return None if text.strip() in ("", "None") else float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text.strip()


def config_from_text(cls, text: str, strict: bool = True):
    defaults = cls()
    known = {f.name: getattr(defaults, f.name) for f in fields(cls)}
    vals = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        k = k.strip()
        if k not in known:
            if strict:
                raise ValueError(f"unknown config key {k!r}")
            continue
        vals[k] = parse_value(v, known[k])
    return cls(**vals)


class Model:
    """Parameters, batch-norm statistics and the forward passes."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Node] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.frozen: set[str] = set()
        self._rng = np.random.default_rng(seed)
        self._build()

    # ---------------------------------------------------------------- init

    def _he(self, name: str, shape: tuple, fan_in: int) -> None:
        w = self._rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.params[name] = ad.parameter(w, self.dtype)

    def _zeros(self, name: str, shape: tuple) -> None:
        self.params[name] = ad.parameter(np.zeros(shape), self.dtype)

    def _conv(self, name: str, cin: int, cout: int, kh: int, kw: int) -> None:
        self._he(name + "/kernel", (cout, cin, kh, kw), cin * kh * kw)

    def _norm(self, name: str, c: int) -> None:
        self.params[name + "/gamma"] = ad.parameter(np.ones(c), self.dtype)
        self._zeros(name + "/beta", (c,))
        self.bn[name] = BatchNormState(c, self.dtype)

    def _dense(self, name: str, cin: int, cout: int, bias: bool = True) -> None:
        self._he(name + "/W", (cin, cout), cin)
        if bias:
            self._zeros(name + "/b", (cout,))

    def _gru(self, name: str, cin: int, hid: int) -> None:
        self._he(name + "/W", (cin, 3 * hid), cin)
        self._he(name + "/U", (hid, 3 * hid), hid)
        self._zeros(name + "/b", (3 * hid,))

    def _build(self) -> None:
        c = self.config
        for tower in c.towers:
            cin = c.in_channels(tower)
            self._conv(f"{tower}/stem", cin, c.stem_width, 3, 3)
            self._norm(f"{tower}/stem/bn", c.stem_width)
            cin = c.stem_width
            for i, (width, stride) in enumerate(zip(c.tower_widths(), c.block_strides), 1):
                p = f"{tower}/block{i}"
                self._conv(p + "/conv1", cin, width, 1, 1)
                self._norm(p + "/bn1", width)
                self._conv(p + "/conv2", width, width, 3, 3)
                self._norm(p + "/bn2", width)
                self._conv(p + "/conv3", width, width, 1, 1)
                self._norm(p + "/bn3", width)
                if cin != width or stride != 1:
                    self._conv(p + "/shortcut", cin, width, 1, 1)
                    self._norm(p + "/shortcut_bn", width)
                cin = width
        cin = c.embedding_size
        for i, width in enumerate(c.decoder_widths, 1):
            # batch norm follows, and its beta already supplies the offset
            self._dense(f"dec/fc{i}", cin, width, bias=False)
            self._norm(f"dec/fc{i}/bn", width)
            cin = width
        self._dense("dec/out", cin, c.mel_block_size)
        if c.use_postnet:
            n = c.n_mels
            for k in range(1, c.bank_size + 1):
                self._he(f"post/bank{k}/kernel", (c.bank_channels, n, k), n * k)
                self._norm(f"post/bank{k}/bn", c.bank_channels)
            self._he("post/proj1/kernel", (c.projection_width, c.bank_size * c.bank_channels, 3), c.bank_size * c.bank_channels * 3)
            self._norm("post/proj1/bn", c.projection_width)
            self._he("post/proj2/kernel", (n, c.projection_width, 3), c.projection_width * 3)
            self._norm("post/proj2/bn", n)
            if n != c.highway_width:
                self._dense("post/pre_highway", n, c.highway_width)
            for i in range(c.highway_layers):
                self._dense(f"post/highway{i}/h", c.highway_width, c.highway_width)
                self._dense(f"post/highway{i}/t", c.highway_width, c.highway_width)
            self._gru("post/gru_fw", c.highway_width, c.gru_width)
            self._gru("post/gru_bw", c.highway_width, c.gru_width)
            self._dense("post/out", 2 * c.gru_width, c.d_lin)

    # ------------------------------------------------------------- helpers

    def _bn(self, x: Node, name: str, mode: str) -> Node:
        return ad.batch_norm(x, self.params[name + "/gamma"], self.params[name + "/beta"], self.bn[name], mode)

    def _act(self, x: Node) -> Node:
        return ad.leaky_relu(x, self.config.leaky_alpha)

    def _dense_layer(self, x: Node, name: str) -> Node:
        return ad.dense(x, self.params[name + "/W"], self.params[name + "/b"])

    def _gru_params(self, name: str) -> dict:
        return {k: self.params[f"{name}/{k}"] for k in ("W", "U", "b")}

    def _highway_params(self, name: str) -> dict:
        p = self.params
        return {"W_h": p[name + "/h/W"], "b_h": p[name + "/h/b"], "W_t": p[name + "/t/W"], "b_t": p[name + "/t/b"]}

    # ------------------------------------------------------------- forward

    def tower_forward(self, tower: str, x: Node, mode: str, rng=None, dropout: float = 0.0) -> tuple[Node, Node]:
        """Returns the pooled tower output and its pre-pool feature map."""
        c = self.config
        p = self.params
        h = self._act(self._bn(ad.conv2d(x, p[f"{tower}/stem/kernel"]), f"{tower}/stem/bn", mode))
        for i, stride in enumerate(c.block_strides, 1):
            b = f"{tower}/block{i}"
            y = self._act(self._bn(ad.conv2d(h, p[b + "/conv1/kernel"]), b + "/bn1", mode))
            y = self._act(self._bn(ad.conv2d(y, p[b + "/conv2/kernel"], stride), b + "/bn2", mode))
            y = self._bn(ad.conv2d(y, p[b + "/conv3/kernel"]), b + "/bn3", mode)
            if b + "/shortcut/kernel" in p:
                h = self._bn(ad.conv2d(h, p[b + "/shortcut/kernel"], stride), b + "/shortcut_bn", mode)
            h = self._act(y + h)
            h = ad.dropout(h, dropout, mode, rng)
        return ad.global_avg_pool(h), h

    def encoder_forward(
        self,
        pixels: Optional[np.ndarray | Node],
        flows: Optional[np.ndarray | Node],
        mode: str = "infer",
        rng=None,
        dropout: float = 0.0,
        return_maps: bool = False,
    ):
        """Embedding for a batch of ``B×K×H×W`` pixel clips and ``B×2(K-1)×H×W`` flow clips."""
        c = self.config
        inputs = {"pix": pixels, "flow": flows}
        for tower, on in (("pix", c.use_pixels), ("flow", c.use_flow)):
            if not on and inputs[tower] is not None:
                log.warning("%s tower is disabled; ignoring its input", tower)
            if on and inputs[tower] is None:
                raise ValueError(f"{tower} tower is enabled but no input was given")
        outs, maps = [], {}
        for tower in c.towers:
            x = inputs[tower]
            x = x if isinstance(x, Node) else ad.constant(np.asarray(x, dtype=self.dtype))
            pooled, fmap = self.tower_forward(tower, x, mode, rng, dropout)
            outs.append(pooled)
            maps[tower] = fmap
        emb = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        return (emb, maps) if return_maps else emb

    def decoder_forward(self, emb: Node, mode: str = "infer", rng=None, dropout: float = 0.0) -> Node:
        """Mel block in tanh range, shape ``B×l×n``."""
        c = self.config
        if emb.shape[-1] != c.embedding_size:
            raise ad.ShapeError(f"embedding of size {emb.shape[-1]}, config expects {c.embedding_size}")
        h = emb
        for i in range(1, len(c.decoder_widths) + 1):
            h = self._act(self._bn(ad.matmul(h, self.params[f"dec/fc{i}/W"]), f"dec/fc{i}/bn", mode))
            h = ad.dropout(h, dropout, mode, rng)
        out = ad.tanh(self._dense_layer(h, "dec/out"))
        return ad.reshape(out, (emb.shape[0], c.l, c.n_mels))

    def conv_bank(self, x: Node, mode: str) -> Node:
        """``B×n×L`` → ``B×(bank·C)×L``, one same-padded conv per width 1..bank."""
        p = self.params
        outs = []
        for k in range(1, self.config.bank_size + 1):
            y = ad.conv1d(x, p[f"post/bank{k}/kernel"])
            outs.append(ad.relu(self._bn(y, f"post/bank{k}/bn", mode)))
        return ad.concat(outs, axis=1)

    def postnet_forward(self, mels: Node, mode: str = "infer") -> Node:
        """CBHG over a ``B×L×n`` feature-space mel sequence; returns ``B×L×d_lin`` in tanh range."""
        c = self.config
        p = self.params
        if not c.use_postnet:
            raise ValueError("model was built without a post-net")
        b, length, n = mels.shape
        if n != c.n_mels:
            raise ad.ShapeError(f"post-net expects {c.n_mels} mel bins, got {n}")
        x = ad.transpose(mels, (0, 2, 1))
        y = ad.max_pool_time(self.conv_bank(x, mode), 2)
        y = ad.relu(self._bn(ad.conv1d(y, p["post/proj1/kernel"]), "post/proj1/bn", mode))
        y = self._bn(ad.conv1d(y, p["post/proj2/kernel"]), "post/proj2/bn", mode)
        y = ad.transpose(y + x, (0, 2, 1))
        if "post/pre_highway/W" in p:
            y = self._dense_layer(y, "post/pre_highway")
        for i in range(c.highway_layers):
            y = ad.highway(y, self._highway_params(f"post/highway{i}"))
        y = ad.bidirectional_gru(y, self._gru_params("post/gru_fw"), self._gru_params("post/gru_bw"))
        return ad.tanh(self._dense_layer(y, "post/out"))

    def predict_frames(self, pixels, flows, mode: str = "infer", rng=None, dropout=(0.0, 0.0)) -> Node:
        """Encoder + decoder for a batch of single-frame clips, output in feature space [0,1]."""
        emb = self.encoder_forward(pixels, flows, mode, rng, dropout[0])
        return to_feature(self.decoder_forward(emb, mode, rng, dropout[1]))

    # ------------------------------------------------------------ utilities

    def tower_names(self) -> list[str]:
        return [k for k in self.params if k.split("/", 1)[0] in ("pix", "flow")]

    def postnet_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("post/")]

    def trainable(self) -> dict[str, Node]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.value for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[k + "/running_mean"] = s.mean
            out[k + "/running_var"] = s.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks tensor {k}")
            if arrays[k].shape != v.shape:
                raise ad.ShapeError(f"{k}: checkpoint {arrays[k].shape} vs model {v.shape}")
            v.value = np.array(arrays[k], dtype=self.dtype)
        for k, s in self.bn.items():
            s.mean = np.array(arrays[k + "/running_mean"], dtype=self.dtype)
            s.var = np.array(arrays[k + "/running_var"], dtype=self.dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: np.array(v, copy=True) for k, v in self.state_arrays().items()}

    def astype(self, dtype) -> "Model":
        m = Model.__new__(Model)
        m.config, m.dtype, m.frozen = self.config, dtype, set(self.frozen)
        m._rng = np.random.default_rng(0)
        m.params = {k: ad.parameter(v.value, dtype) for k, v in self.params.items()}
        m.bn = {}
        for k, s in self.bn.items():
            ns = BatchNormState(len(s.mean), dtype, s.momentum, s.eps)
            ns.mean, ns.var = s.mean.astype(dtype), s.var.astype(dtype)
            m.bn[k] = ns
        return m


def to_feature(x: Node) -> Node:
    """Map tanh output in (-1,1) to feature space (0,1)."""
    return (x + 1.0) * 0.5


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Model, extra_text: str = "") -> None:
    """``V2SM``, version, config text, then named tensors (float32 LE)."""
    text = (config_to_text(model.config) + extra_text).encode("utf-8")
    arrays = model.state_arrays()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(text)), text, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(buf) < 12:
        raise FormatError(path, 4, "truncated header")
    version, tlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, 4, f"unsupported checkpoint version {version}")
    pos = 12
    if len(buf) < pos + tlen + 4:
        raise FormatError(path, pos, "truncated config block")
    text = buf[pos : pos + tlen].decode("utf-8")
    pos += tlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        if len(buf) < pos + 4:
            raise FormatError(path, pos, "truncated tensor name length")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arrays[name], pos = parse_tensor_body(buf, pos, path)
    if pos != len(buf):
        raise FormatError(path, pos, f"{len(buf) - pos} trailing bytes")
    return text, arrays


def load_checkpoint(path) -> tuple[Model, str]:
    """Returns the model and the full config text (model keys plus any extras)."""
    text, arrays = read_checkpoint(path)
    cfg = config_from_text(ModelConfig, text, strict=False)
    model = Model(cfg)
    model.load_state_arrays(arrays)
    return model, text
