"""Self-describing binary checkpoints.

Layout: magic "MMTC", u32 version, length-prefixed UTF-8 key-value text
(model config, system/visual selection, training metadata), u32 tensor
count, then per tensor: length-prefixed name, u32 ndim, u32 dims,
float32 little-endian payload. Roundtrips are bit-exact for float32
parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import FormatError, ShapeError
from .model import ModelConfig, TransformerMT

MAGIC = b"MMTC"
VERSION = 1

_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


@dataclass
class Checkpoint:
    config: ModelConfig
    system: str                                # base | delib
    visual: str                                # none | sum | att | obj
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_model(cls, model, meta: dict | None = None) -> "Checkpoint":
        from .deliberation import DeliberationModel

        system = "delib" if isinstance(model, DeliberationModel) else "base"
        tensors = {
            name: np.ascontiguousarray(p.data, dtype=np.float32)
            for name, p in sorted(model.parameters().items())
        }
        return cls(
            config=model.cfg,
            system=system,
            visual=model.visual,
            tensors=tensors,
            meta={k: str(v) for k, v in (meta or {}).items()},
        )

    def build_model(self):
        """Reconstruct the model and load the stored weights into it."""
        from .deliberation import DeliberationModel

        seed = int(self.meta.get("seed", "0"))
        if self.system == "delib":
            model = DeliberationModel(self.config, seed=seed, visual=self.visual)
        else:
            model = TransformerMT(self.config, seed=seed, visual=self.visual)
        params = model.parameters()
        missing = sorted(set(params) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(params))
        if missing or extra:
            raise FormatError(
                f"checkpoint/architecture tensor mismatch; missing {missing}, "
                f"unexpected {extra}"
            )
        for name, arr in self.tensors.items():
            if params[name].data.shape != arr.shape:
                raise FormatError(
                    f"tensor {name!r} has shape {arr.shape}, architecture "
                    f"expects {params[name].data.shape}"
                )
            params[name].data = arr.astype(params[name].data.dtype).copy()
        return model

    def require_config(self, cfg: ModelConfig) -> None:
        """Refuse use under a conflicting explicit configuration."""
        diff = self.config.diff(cfg)
        if diff:
            raise ShapeError(
                "checkpoint config incompatible with the requested run; "
                f"differing fields: {', '.join(sorted(diff))}"
            )


def _config_text(ckpt: Checkpoint) -> str:
    lines = [f"system = {ckpt.system}", f"visual = {ckpt.visual}"]
    for name in _CONFIG_FIELDS:
        lines.append(f"{name} = {getattr(ckpt.config, name)}")
    for k in sorted(ckpt.meta):
        lines.append(f"meta.{k} = {ckpt.meta[k]}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> tuple[ModelConfig, str, str, dict]:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"bad checkpoint config line {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    meta = {k[len("meta."):]: v for k, v in kv.items() if k.startswith("meta.")}
    system = kv.pop("system", "base")
    visual = kv.pop("visual", "none")
    cfg_kwargs = {}
    for name in _CONFIG_FIELDS:
        if name not in kv:
            raise FormatError(f"checkpoint config missing field {name!r}")
        raw = kv[name]
        cfg_kwargs[name] = float(raw) if name == "dropout" else int(raw)
    return ModelConfig(**cfg_kwargs), system, visual, meta


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        blob = _config_text(ckpt).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _need(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint reading {what}",
                          offset=fh.tell() - len(data))
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        (version,) = struct.unpack("<I", _need(fh, 4, "version"))
        if version != VERSION:
            raise FormatError(
                f"unsupported checkpoint version {version}, expected {VERSION}",
                offset=4,
            )
        (cfg_len,) = struct.unpack("<I", _need(fh, 4, "config length"))
        cfg_text = _need(fh, cfg_len, "config").decode("utf-8")
        config, system, visual, meta = _parse_config_text(cfg_text)
        (count,) = struct.unpack("<I", _need(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _need(fh, 4, "tensor name length"))
            name = _need(fh, name_len, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _need(fh, 4, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}I", _need(fh, 4 * ndim, f"{name} shape"))
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            payload = _need(fh, nbytes, f"{name} data")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last tensor",
                              offset=fh.tell() - 1)
    return Checkpoint(config=config, system=system, visual=visual,
                      tensors=tensors, meta=meta, version=version)
