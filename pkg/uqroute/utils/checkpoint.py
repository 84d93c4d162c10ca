"""Binary "UQRT" checkpoint for a preference head.

Layout:

    b"UQRT" | uint32 version | uint32 header length | JSON header | arrays

All integers are little-endian. The JSON header carries dims, seeds, configs,
tau, lambda, n_samples and the ordered list of (name, shape) for the arrays
that follow; every array is little-endian float64 in row-major order. The
encoder power-iteration vectors ride along so a reloaded head keeps
renormalizing from the same warm start.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np

from uqroute.encoder import Encoder, RandomFeatureMap
from uqroute.sngp_head import GpHead, PosteriorCovariance
from uqroute.utils.config import EncoderConfig, GpHeadConfig
from uqroute.utils.errors import InvalidInputError, SchemaError

logger = logging.getLogger(__name__)

MAGIC = b"UQRT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f8")


def _collect_arrays(head: GpHead) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    for i, (w, b) in enumerate(zip(head.encoder.weights, head.encoder.biases)):
        arrays.append((f"encoder.W{i}", w))
        arrays.append((f"encoder.b{i}", b))
    for i, u in enumerate(head.encoder.left_vectors):
        arrays.append((f"encoder.u{i}", u))
    arrays.append(("features.W", head.feature_map.W))
    arrays.append(("features.b", head.feature_map.b))
    arrays.append(("beta", head.beta))
    if head.covariance is not None:
        arrays.append(("sigma", head.covariance.sigma))
        arrays.append(("precision_chol", head.covariance.precision_chol))
    return arrays


def save_checkpoint(head: GpHead, path: Path) -> Path:
    """Serialize a head (with its covariance, if computed) atomically."""
    arrays = _collect_arrays(head)
    header = {
        "encoder": head.encoder.config.model_dump(mode="json"),
        "feature_map": {
            "num_features": head.feature_map.num_features,
            "input_dim": head.feature_map.input_dim,
            "sigma_k": head.feature_map.sigma_k,
            "seed": head.feature_map.seed,
        },
        "head": head.config.model_dump(mode="json"),
        "tau": head.config.tau,
        "lambda": head.config.uncertainty_scale,
        "n_samples": head.covariance.n_samples if head.covariance is not None else 0,
        "has_covariance": head.covariance is not None,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C"))
    tmp_path.replace(path)
    logger.info(
        "Saved checkpoint %s (D_r=%d, covariance=%s)",
        path, head.num_features, head.covariance is not None,
    )
    return path


def load_checkpoint(path: Path) -> GpHead:
    """Rebuild a head from a checkpoint file.

    Raises:
        FileNotFoundError: If the file does not exist.
        InvalidInputError: If the magic or version is wrong.
        SchemaError: If the header or array payload is truncated or inconsistent.
    """
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise SchemaError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: not a UQRT checkpoint")
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: corrupt checkpoint header") from exc

    offset = _PREFIX.size + header_len
    arrays: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + count * _DTYPE.itemsize > len(data):
            raise SchemaError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset).reshape(shape).copy()
        offset += count * _DTYPE.itemsize
    if offset != len(data):
        raise SchemaError(f"{path}: {len(data) - offset} trailing bytes")

    encoder_config = EncoderConfig.model_validate(header["encoder"])
    n_layers = len(encoder_config.hidden_dims) + 1
    required = [f"encoder.{kind}{i}" for i in range(n_layers) for kind in ("W", "b")]
    required += ["features.W", "features.b", "beta"]
    if header["has_covariance"]:
        required += ["sigma", "precision_chol"]
    missing = [name for name in required if name not in arrays]
    if missing:
        raise SchemaError(f"{path}: checkpoint is missing arrays {missing}")
    left_vectors = None
    if all(f"encoder.u{i}" in arrays for i in range(n_layers)):
        left_vectors = [arrays[f"encoder.u{i}"] for i in range(n_layers)]
    encoder = Encoder(
        encoder_config,
        [arrays[f"encoder.W{i}"] for i in range(n_layers)],
        [arrays[f"encoder.b{i}"] for i in range(n_layers)],
        left_vectors=left_vectors,
    )
    fm = header["feature_map"]
    feature_map = RandomFeatureMap(arrays["features.W"], arrays["features.b"], fm["sigma_k"], fm["seed"])
    covariance = None
    if header["has_covariance"]:
        covariance = PosteriorCovariance(
            sigma=arrays["sigma"],
            precision_chol=arrays["precision_chol"],
            n_samples=int(header["n_samples"]),
        )
    head = GpHead(
        GpHeadConfig.model_validate(header["head"]),
        encoder,
        feature_map,
        beta=arrays["beta"],
        covariance=covariance,
    )
    logger.info("Loaded checkpoint %s (D_r=%d, covariance=%s)", path, head.num_features, covariance is not None)
    return head
