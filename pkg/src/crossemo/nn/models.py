"""The two classifier architectures.

cnn-blstm-att: a stack of convolutions over the (time, band) grid, one
bidirectional LSTM, a time-distributed stack of fully connected layers with
batch norm and dropout, additive attention pooling over time, and a linear
classifier.

blstm-att: two bidirectional LSTM layers straight on the feature sequence,
attention pooling, linear classifier.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import BadConfig, ShapeMismatch
from ..ioutil import config_digest
from . import layers, ops
from .tensor import Tensor

ARCH_CNN = "cnn-blstm-att"
ARCH_BLSTM = "blstm-att"


@dataclass(frozen=True)
class CnnBlstmAttConfig:
    conv_channels: tuple = (32, 32, 64, 64, 128, 128)
    conv_kernel: int = 3
    conv_stride: int = 1
    pool_after: tuple = (2, 4, 6)  # 1-indexed conv layers followed by 2x2 max-pool
    conv_batchnorm: bool = False
    blstm_hidden: int = 512
    fc_sizes: tuple = (512, 512, 256, 128)
    dropout: float = 0.2
    attention_dim: int = 128
    n_classes: int = 4
    input_bands: int = 23

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "pool_after", tuple(self.pool_after))
        object.__setattr__(self, "fc_sizes", tuple(self.fc_sizes))
        if not self.conv_channels or not self.fc_sizes:
            raise BadConfig("need at least one conv layer and one fc layer")
        if self.n_classes < 2:
            raise BadConfig("n_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig("dropout must be in [0, 1)")
        if any(p < 1 or p > len(self.conv_channels) for p in self.pool_after):
            raise BadConfig("pool_after entries must index conv layers (1-based)")
        if self.blstm_hidden < 1 or self.attention_dim < 1 or self.input_bands < 1:
            raise BadConfig("sizes must be positive")


@dataclass(frozen=True)
class BlstmAttConfig:
    blstm_layers: int = 2
    hidden: int = 512
    attention_dim: int = 128
    n_classes: int = 4
    input_bands: int = 23

    def __post_init__(self):
        if self.blstm_layers < 1 or self.hidden < 1:
            raise BadConfig("need at least one BLSTM layer with positive width")
        if self.n_classes < 2:
            raise BadConfig("n_classes must be >= 2")


class ModelGraph:
    """Named parameters plus a forward topology and a train/eval mode.

    Mode switches only dropout and batch-norm behavior; parameter values are
    untouched. A graph belongs to one training run at a time; eval-mode
    inference on frozen parameters is safe to share.
    """

    def __init__(self, arch: str, config, params: dict, bn_stats: dict):
        self.arch = arch
        self.config = config
        self.params = params
        self.bn_stats = bn_stats
        self.mode = "train"

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise BadConfig(f"mode must be train or eval, got {mode!r}")
        self.mode = mode

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def config_dict(self) -> dict:
        cfg = asdict(self.config)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}

    @property
    def digest(self) -> str:
        return config_digest({"arch": self.arch, "config": self.config_dict()})

    def forward(self, feats: np.ndarray, dropout_rng=None) -> Tensor:
        if self.arch == ARCH_CNN:
            return _cnn_forward(self, feats, dropout_rng)
        if self.arch == ARCH_BLSTM:
            return _blstm_forward(self, feats)
        raise BadConfig(f"unknown architecture {self.arch!r}")


def _check_input(feats: np.ndarray, input_bands: int) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float32)
    if feats.ndim != 3 or feats.shape[2] != input_bands:
        raise ShapeMismatch(
            f"expected [batch, time, {input_bands}] features, got {feats.shape}"
        )
    return feats


def _cnn_forward(graph: ModelGraph, feats: np.ndarray, dropout_rng) -> Tensor:
    cfg = graph.config
    feats = _check_input(feats, cfg.input_bands)
    batch, n_steps, bands = feats.shape
    x = Tensor(feats.reshape(batch, 1, n_steps, bands))
    for i in range(len(cfg.conv_channels)):
        x = ops.conv2d(
            x, graph.params[f"conv{i}.w"], graph.params[f"conv{i}.b"], stride=cfg.conv_stride
        )
        if cfg.conv_batchnorm:
            x = ops.batch_norm(
                x,
                graph.params[f"conv{i}.bn.gamma"],
                graph.params[f"conv{i}.bn.beta"],
                graph.bn_stats[f"conv{i}.bn"],
                graph.mode,
                feature_axis=1,
            )
        x = ops.relu(x)
        if (i + 1) in cfg.pool_after:
            x = ops.max_pool2d(x, 2)
    _, ch, t_out, b_out = x.shape
    if t_out < 1 or b_out < 1:
        raise ShapeMismatch("conv/pool stack consumed the whole input")
    seq = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (batch, t_out, ch * b_out))
    seq = layers.blstm_forward(graph.params, "blstm0", seq, cfg.blstm_hidden)

    flat = ops.reshape(seq, (batch * t_out, 2 * cfg.blstm_hidden))
    for j in range(len(cfg.fc_sizes)):
        flat = layers.dense(graph.params, f"fc{j}", flat)
        flat = ops.batch_norm(
            flat,
            graph.params[f"fc{j}.bn.gamma"],
            graph.params[f"fc{j}.bn.beta"],
            graph.bn_stats[f"fc{j}.bn"],
            graph.mode,
        )
        flat = ops.relu(flat)
        flat = ops.dropout(flat, cfg.dropout, graph.mode, dropout_rng)
    seq = ops.reshape(flat, (batch, t_out, cfg.fc_sizes[-1]))

    pooled, _ = layers.attention_forward(graph.params, "att", seq)
    return layers.dense(graph.params, "classifier", pooled)


def _blstm_forward(graph: ModelGraph, feats: np.ndarray) -> Tensor:
    cfg = graph.config
    feats = _check_input(feats, cfg.input_bands)
    seq = Tensor(feats)
    for i in range(cfg.blstm_layers):
        seq = layers.blstm_forward(graph.params, f"blstm{i}", seq, cfg.hidden)
    pooled, _ = layers.attention_forward(graph.params, "att", seq)
    return layers.dense(graph.params, "classifier", pooled)


def build_cnn_blstm_att(cfg: CnnBlstmAttConfig, seed: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    params: dict = {}
    stats: dict = {}
    in_ch = 1
    bands = cfg.input_bands
    for i, out_ch in enumerate(cfg.conv_channels):
        layers.add_conv(params, rng, f"conv{i}", in_ch, out_ch, cfg.conv_kernel)
        if cfg.conv_batchnorm:
            layers.add_batchnorm(params, stats, f"conv{i}.bn", out_ch)
        if (i + 1) in cfg.pool_after:
            bands //= 2
        in_ch = out_ch
    if bands < 1:
        raise BadConfig(
            f"pooling schedule collapses {cfg.input_bands} bands to zero width"
        )
    layers.add_blstm(params, rng, "blstm0", in_ch * bands, cfg.blstm_hidden)
    fc_in = 2 * cfg.blstm_hidden
    for j, width in enumerate(cfg.fc_sizes):
        layers.add_dense(params, rng, f"fc{j}", fc_in, width)
        layers.add_batchnorm(params, stats, f"fc{j}.bn", width)
        fc_in = width
    layers.add_attention(params, rng, "att", fc_in, cfg.attention_dim)
    layers.add_dense(params, rng, "classifier", fc_in, cfg.n_classes)
    graph = ModelGraph(ARCH_CNN, cfg, params, stats)
    print(f"[crossemo] built {ARCH_CNN}: {graph.parameter_count():,} parameters")
    return graph


def build_blstm_att(cfg: BlstmAttConfig, seed: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    params: dict = {}
    stats: dict = {}
    n_in = cfg.input_bands
    for i in range(cfg.blstm_layers):
        layers.add_blstm(params, rng, f"blstm{i}", n_in, cfg.hidden)
        n_in = 2 * cfg.hidden
    layers.add_attention(params, rng, "att", n_in, cfg.attention_dim)
    layers.add_dense(params, rng, "classifier", n_in, cfg.n_classes)
    graph = ModelGraph(ARCH_BLSTM, cfg, params, stats)
    print(f"[crossemo] built {ARCH_BLSTM}: {graph.parameter_count():,} parameters")
    return graph


def config_from_dict(arch: str, cfg: dict):
    def tup(d, *keys):
        return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in d.items()}

    if arch == ARCH_CNN:
        return CnnBlstmAttConfig(**tup(cfg, "conv_channels", "pool_after", "fc_sizes"))
    if arch == ARCH_BLSTM:
        return BlstmAttConfig(**cfg)
    raise BadConfig(f"unknown architecture {arch!r}")


def build_model(arch: str, cfg, seed: int) -> ModelGraph:
    if isinstance(cfg, dict):
        cfg = config_from_dict(arch, cfg)
    if arch == ARCH_CNN:
        return build_cnn_blstm_att(cfg, seed)
    if arch == ARCH_BLSTM:
        return build_blstm_att(cfg, seed)
    raise BadConfig(f"unknown architecture {arch!r}")
