"""Embedding extractor (backbone -> pooling -> linear) and its parameter file.

File layout, all little-endian::

    b"SVRM"  u32 version
    repeated until EOF:
        u16 name length, UTF-8 name, u32 rank, rank x u32 extents, f32 values

Train and deploy models share the format; the scalar ``mode`` record is
0 for train and 1 for deploy. Block ``i`` stores its tensors under
``backbone.{i}.*`` together with scalar ``stride`` and ``groups`` records.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO

import numpy as np

from .features import cmn
from .pooling import PoolingConfig, mqmha_forward, stats_pooling
from .repvgg import (
    Block,
    RepVGGBlockDeploy,
    RepVGGBlockTrain,
    backbone_forward,
    block_mode,
    reparameterize_backbone,
)
from .tensor import BatchNormParams, Conv2dParams

MAGIC = b"SVRM"
VERSION = 1
_BN_FIELDS = ("gamma", "beta", "mean", "var", "eps")


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerModel:
    blocks: tuple[Block, ...]
    queries: np.ndarray | None = None   # [H, Q, d/H]; stats pooling when absent
    embed_weight: np.ndarray | None = None  # [pooled_dim, d_emb]
    embed_bias: np.ndarray | None = None
    n_mels: int | None = None

    @property
    def mode(self) -> str:
        modes = {block_mode(b) for b in self.blocks}
        if len(modes) != 1:
            raise ModelFormatError("model mixes train and deploy blocks")
        return modes.pop()

    def pooling_config(self, d: int) -> PoolingConfig:
        h, q, k = self.queries.shape
        if h * k != d:
            raise ValueError(f"query bank {self.queries.shape} incompatible with frame dim {d}")
        return PoolingConfig(d, h, q)

    def frames(self, feats: np.ndarray) -> np.ndarray:
        """``[T, n_mels]`` features -> backbone sequence ``[T', d]``."""
        return backbone_forward(self.blocks, cmn(feats).T[None])

    def embed(self, feats: np.ndarray) -> np.ndarray:
        O = self.frames(feats)
        if self.queries is None:
            pooled = stats_pooling(O)
        else:
            pooled = mqmha_forward(O, self.queries, self.pooling_config(O.shape[1])).concat()
        if self.embed_weight is None:
            return pooled
        out = pooled @ self.embed_weight
        return out if self.embed_bias is None else out + self.embed_bias

    def reparameterize(self) -> "SpeakerModel":
        return replace(self, blocks=tuple(reparameterize_backbone(self.blocks)))


def _records(model: SpeakerModel):
    yield "mode", np.array(0.0 if model.mode == "train" else 1.0)
    if model.n_mels is not None:
        yield "input.n_mels", np.array(float(model.n_mels))
    for i, b in enumerate(model.blocks):
        p = f"backbone.{i}."
        yield p + "stride", np.array(float(b.stride))
        yield p + "groups", np.array(float(b.groups))
        if isinstance(b, RepVGGBlockDeploy):
            yield p + "conv.weight", b.conv.weight
            yield p + "conv.bias", b.conv.bias
            continue
        yield p + "conv3.weight", b.conv3
        yield p + "conv1.weight", b.conv1
        for name, bn in (("bn3", b.bn3), ("bn1", b.bn1), ("id_bn", b.id_bn)):
            if bn is None:
                continue
            for f in _BN_FIELDS:
                yield f"{p}{name}.{f}", np.asarray(getattr(bn, f), dtype=np.float64)
    if model.queries is not None:
        yield "pooling.queries", model.queries
    if model.embed_weight is not None:
        yield "embed.weight", model.embed_weight
    if model.embed_bias is not None:
        yield "embed.bias", model.embed_bias


def write_records(fh: BinaryIO, records) -> None:
    fh.write(MAGIC + struct.pack("<I", VERSION))
    for name, arr in records:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_records(fh: BinaryIO) -> dict[str, np.ndarray]:
    head = fh.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise ModelFormatError("not an SVRM model file (bad magic)")
    (version,) = struct.unpack("<I", head[4:])
    if version != VERSION:
        raise ModelFormatError(f"unsupported SVRM version {version}")
    out = {}
    while True:
        b = fh.read(2)
        if not b:
            return out
        try:
            (n,) = struct.unpack("<H", b)
            name = fh.read(n).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = fh.read(4 * count)
            if len(data) != 4 * count:
                raise ModelFormatError(f"record {name!r} truncated")
        except struct.error as exc:
            raise ModelFormatError(f"truncated record header: {exc}") from exc
        out[name] = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(shape)


def save_model(path, model: SpeakerModel) -> None:
    with open(path, "wb") as fh:
        write_records(fh, _records(model))


def _bn(rec, prefix):
    if prefix + "gamma" not in rec:
        return None
    return BatchNormParams(*(rec[prefix + f] for f in _BN_FIELDS[:4]), float(rec[prefix + "eps"]))


def load_model(path) -> SpeakerModel:
    with open(path, "rb") as fh:
        return model_from_records(read_records(fh))


def model_from_records(rec: dict[str, np.ndarray]) -> SpeakerModel:
    if "mode" not in rec:
        raise ModelFormatError("model file has no 'mode' record")
    deploy = float(rec["mode"]) == 1.0
    blocks = []
    i = 0
    while f"backbone.{i}.stride" in rec:
        p = f"backbone.{i}."
        stride, groups = int(rec[p + "stride"]), int(rec[p + "groups"])
        try:
            if deploy:
                blocks.append(RepVGGBlockDeploy(Conv2dParams(
                    rec[p + "conv.weight"], rec[p + "conv.bias"], stride, 1, groups)))
            else:
                blocks.append(RepVGGBlockTrain(
                    rec[p + "conv3.weight"], _bn(rec, p + "bn3."), rec[p + "conv1.weight"],
                    _bn(rec, p + "bn1."), _bn(rec, p + "id_bn."), stride, groups))
        except KeyError as exc:
            raise ModelFormatError(f"block {i} is missing record {exc.args[0]!r}") from exc
        i += 1
    if not blocks:
        raise ModelFormatError("model file has no backbone blocks")
    n_mels = int(rec["input.n_mels"]) if "input.n_mels" in rec else None
    return SpeakerModel(tuple(blocks), rec.get("pooling.queries"),
                        rec.get("embed.weight"), rec.get("embed.bias"), n_mels)


def round_to_f32(model: SpeakerModel) -> SpeakerModel:
    """The model as it comes back from a save/load round trip."""
    buf = io.BytesIO()
    write_records(buf, _records(model))
    buf.seek(0)
    return model_from_records(read_records(buf))


def init_model(config, n_mels: int, rng: np.random.Generator, heads: int | None = 1,
               queries: int = 1, emb_dim: int | None = 512) -> SpeakerModel:
    """Random training-mode model; ``heads=None`` selects plain statistics pooling."""
    from .pooling import init_queries
    from .repvgg import init_backbone, output_shape

    blocks = tuple(init_backbone(config, rng))
    _, d = output_shape(config, n_mels, 1)
    mu = None
    pooled = 2 * d
    if heads is not None:
        cfg = PoolingConfig(d, heads, queries)
        mu = init_queries(cfg, rng)
        pooled = cfg.output_dim
    w = b = None
    if emb_dim:
        w = rng.normal(0.0, 1.0 / np.sqrt(pooled), (pooled, emb_dim))
        b = np.zeros(emb_dim)
    return SpeakerModel(blocks, mu, w, b, n_mels)
