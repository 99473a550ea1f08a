"""Binary checkpoint format.

Layout: ``b"DBCK"``, a little-endian u16 version, a u32 header length, the
UTF-8 JSON header (config, metadata, array table), then the arrays as
contiguous little-endian float32.  Keys are sorted and floats written with
``repr`` so a load/save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, ConfigurationError
from ..model import ModelConfig, ModelParams, build_model
from ..tensor_core import AdamState

MAGIC = b"DBCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: dict
    params: dict
    train_config: dict | None = None
    optimizer_step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    best_val_psnr: float | None = None
    epoch: int = 0
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, params: ModelParams, state: AdamState | None = None,
                   train_config: dict | None = None, best_val_psnr: float | None = None,
                   epoch: int = 0) -> "Checkpoint":
        f32 = lambda d: {k: np.asarray(v, dtype=np.float32) for k, v in d.items()}
        state = state or AdamState()
        return cls(model_config=params.config.to_dict(), params=f32(params.arrays()),
                   train_config=train_config, optimizer_step=state.step,
                   adam_m=f32(state.m), adam_v=f32(state.v),
                   best_val_psnr=None if best_val_psnr is None else float(best_val_psnr),
                   epoch=int(epoch))

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model_config)

    def model_params(self) -> ModelParams:
        try:
            return ModelParams.from_arrays(self.config, self.params)
        except ConfigurationError as exc:
            raise CheckpointError(str(exc)) from exc

    def adam_state(self) -> AdamState:
        as64 = lambda d: {k: np.asarray(v, dtype=np.float64) for k, v in d.items()}
        return AdamState(step=self.optimizer_step, m=as64(self.adam_m), v=as64(self.adam_v))

    def to_bytes(self) -> bytes:
        blocks = [("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)]
        table, chunks, offset = [], [], 0
        for group, arrays in blocks:
            for name in sorted(arrays):
                arr = np.ascontiguousarray(arrays[name], dtype="<f4")
                table.append({"group": group, "name": name, "shape": list(arr.shape),
                              "offset": offset})
                chunks.append(arr.tobytes())
                offset += arr.nbytes
        header = {"version": self.version, "model_config": self.model_config,
                  "train_config": self.train_config, "optimizer_step": self.optimizer_step,
                  "best_val_psnr": self.best_val_psnr, "epoch": self.epoch, "arrays": table}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<HI", self.version, len(hbytes)) + hbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes, validate: bool = True) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError("not a DBCK checkpoint (bad magic)")
        version, hlen = struct.unpack("<HI", blob[4:10])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(blob[10:10 + hlen].decode("utf-8"))
        except ValueError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        data = memoryview(blob)[10 + hlen:]
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["offset"]
            if start + 4 * count > len(data):
                raise CheckpointError(f"array {entry['name']} runs past end of file")
            arr = np.frombuffer(data[start:start + 4 * count], dtype="<f4").reshape(entry["shape"])
            groups[entry["group"]][entry["name"]] = arr.astype(np.float32)
        ckpt = cls(model_config=header["model_config"], params=groups["param"],
                   train_config=header["train_config"], optimizer_step=header["optimizer_step"],
                   adam_m=groups["adam_m"], adam_v=groups["adam_v"],
                   best_val_psnr=header["best_val_psnr"], epoch=header["epoch"], version=version)
        if validate:
            ckpt.validate()
        return ckpt

    def validate(self) -> None:
        """Check every expected parameter name and shape is present."""
        try:
            expected = build_model(self.config)
        except (ConfigurationError, TypeError) as exc:
            raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc
        names = set(expected.tensors)
        if set(self.params) != names:
            missing = sorted(names - set(self.params))
            extra = sorted(set(self.params) - names)
            raise CheckpointError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, t in expected.tensors.items():
            if tuple(self.params[name].shape) != t.shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != {t.shape}")

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path, validate: bool = True) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(blob, validate=validate)
