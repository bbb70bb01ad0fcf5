"""Binary checkpoints for posteriors, plain classifiers and GAN pairs.

Layout: ``b"DPVG"``, a little-endian uint32 format version, a uint32-prefixed
UTF-8 JSON header, then for every array named in the header a uint64 element
count followed by that many little-endian float64 values.
"""

from __future__ import annotations

import json
import struct
from enum import StrEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from dpvger.bnn import MeanFieldPosterior
from dpvger.errors import CheckpointError, CheckpointErrorCode
from dpvger.gan import GanPair, PrivacyStamp
from dpvger.nn import Activation, Layer, MlpParams

MAGIC = b"DPVG"
FORMAT_VERSION = 1


class CheckpointKind(StrEnum):
    POSTERIOR = "posterior"
    CLASSIFIER = "classifier"
    GAN = "gan"


class ArraySpec(BaseModel):
    name: str
    shape: List[int]


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    kind: CheckpointKind
    version: int = Field(default=FORMAT_VERSION)
    arrays: List[ArraySpec] = Field(default_factory=list)
    meta: Dict[str, Any] = Field(default_factory=dict)


def write_checkpoint(
    path: str | Path,
    kind: CheckpointKind,
    arrays: Dict[str, np.ndarray],
    meta: Optional[Dict[str, Any]] = None,
) -> CheckpointHeader:
    header = CheckpointHeader(
        kind=kind,
        arrays=[
            ArraySpec(name=name, shape=list(values.shape))
            for name, values in arrays.items()
        ],
        meta=meta or {},
    )
    encoded = header.model_dump_json().encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(encoded)),
        encoded,
    ]
    for values in arrays.values():
        flat = np.ascontiguousarray(values, dtype="<f8").reshape(-1)
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return header


def _parse_header(data: bytes, source: str) -> Tuple[CheckpointHeader, int]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(
            f"{source} is not a checkpoint file", code=CheckpointErrorCode.BAD_HEADER
        )
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{source} has format version {version}, expected {FORMAT_VERSION}",
            code=CheckpointErrorCode.UNSUPPORTED_VERSION,
        )
    (length,) = struct.unpack_from("<I", data, 8)
    end = 12 + length
    if len(data) < end:
        raise CheckpointError(
            f"{source}: header truncated", code=CheckpointErrorCode.TRUNCATED_PAYLOAD
        )
    try:
        header = CheckpointHeader.model_validate(json.loads(data[12:end]))
    except (ValueError, ValidationError) as e:
        raise CheckpointError(
            f"{source}: unreadable header: {e}", code=CheckpointErrorCode.BAD_HEADER
        ) from e
    return header, end


def read_header(path: str | Path) -> CheckpointHeader:
    path = Path(path)
    return _parse_header(_read(path), str(path))[0]


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def read_checkpoint(
    path: str | Path, expected: Optional[CheckpointKind] = None
) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    path = Path(path)
    data = _read(path)
    header, offset = _parse_header(data, str(path))
    if expected is not None and header.kind != expected:
        raise CheckpointError(
            f"{path} holds a {header.kind.value} checkpoint, expected {expected.value}",
            code=CheckpointErrorCode.WRONG_KIND,
        )
    arrays: Dict[str, np.ndarray] = {}
    for spec in header.arrays:
        if len(data) < offset + 8:
            raise CheckpointError(
                f"{path}: missing array {spec.name}",
                code=CheckpointErrorCode.TRUNCATED_PAYLOAD,
            )
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if count != int(np.prod(spec.shape)) or len(data) < offset + 8 * count:
            raise CheckpointError(
                f"{path}: array {spec.name} is truncated or mis-sized",
                code=CheckpointErrorCode.TRUNCATED_PAYLOAD,
            )
        values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        arrays[spec.name] = values.astype(np.float64).reshape(spec.shape)
        offset += 8 * count
    return header, arrays


def _mlp_arrays(prefix: str, params: MlpParams) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for index, layer in enumerate(params.layers):
        arrays[f"{prefix}.{index}.weight"] = layer.weight
        arrays[f"{prefix}.{index}.bias"] = layer.bias
    return arrays


def _mlp_from(
    prefix: str, arrays: Dict[str, np.ndarray], activation: Activation
) -> MlpParams:
    layers = []
    index = 0
    while f"{prefix}.{index}.weight" in arrays:
        layers.append(
            Layer(arrays[f"{prefix}.{index}.weight"], arrays[f"{prefix}.{index}.bias"])
        )
        index += 1
    if not layers:
        raise CheckpointError(
            f"checkpoint has no {prefix} layers", code=CheckpointErrorCode.BAD_HEADER
        )
    return MlpParams(layers=layers, output_activation=activation)


def save_posterior(
    path: str | Path, post: MeanFieldPosterior, meta: Optional[Dict[str, Any]] = None
) -> CheckpointHeader:
    arrays = {**_mlp_arrays("mu", post.mu), **_mlp_arrays("rho", post.rho)}
    return write_checkpoint(path, CheckpointKind.POSTERIOR, arrays, meta)


def load_posterior(path: str | Path) -> Tuple[MeanFieldPosterior, CheckpointHeader]:
    header, arrays = read_checkpoint(path, CheckpointKind.POSTERIOR)
    post = MeanFieldPosterior(
        mu=_mlp_from("mu", arrays, Activation.IDENTITY),
        rho=_mlp_from("rho", arrays, Activation.IDENTITY),
    )
    return post, header


def save_classifier(
    path: str | Path, params: MlpParams, meta: Optional[Dict[str, Any]] = None
) -> CheckpointHeader:
    return write_checkpoint(
        path, CheckpointKind.CLASSIFIER, _mlp_arrays("net", params), meta
    )


def load_classifier(path: str | Path) -> Tuple[MlpParams, CheckpointHeader]:
    header, arrays = read_checkpoint(path, CheckpointKind.CLASSIFIER)
    return _mlp_from("net", arrays, Activation.IDENTITY), header


def save_gan_pair(path: str | Path, pair: GanPair) -> CheckpointHeader:
    meta: Dict[str, Any] = {"task_id": pair.task_id, "label": pair.label}
    if pair.privacy is not None:
        meta["privacy"] = {
            "epsilon": pair.privacy.epsilon,
            "delta": pair.privacy.delta,
            "q": pair.privacy.q,
            "sigma": pair.privacy.sigma,
            "clip_norm": pair.privacy.clip_norm,
            "steps": pair.privacy.steps,
            "halted_at_budget": pair.privacy.halted_at_budget,
        }
    arrays = {
        **_mlp_arrays("generator", pair.generator),
        **_mlp_arrays("discriminator", pair.discriminator),
    }
    return write_checkpoint(path, CheckpointKind.GAN, arrays, meta)


def load_gan_pair(path: str | Path) -> Tuple[GanPair, CheckpointHeader]:
    header, arrays = read_checkpoint(path, CheckpointKind.GAN)
    stamp_data = header.meta.get("privacy")
    try:
        pair = GanPair(
            generator=_mlp_from("generator", arrays, Activation.SIGMOID),
            discriminator=_mlp_from("discriminator", arrays, Activation.IDENTITY),
            label=int(header.meta["label"]),
            task_id=int(header.meta["task_id"]),
            privacy=PrivacyStamp(**stamp_data) if stamp_data else None,
        )
    except (KeyError, TypeError) as e:
        raise CheckpointError(
            f"GAN checkpoint {path} lacks {e}", code=CheckpointErrorCode.BAD_HEADER
        ) from e
    return pair, header


def gan_checkpoint_name(task_id: int, label: int) -> str:
    return f"gan_t{task_id}_c{label}.ckpt"
