"""Newline-delimited dataset and prompt-set files with JSON sidecar manifests.

One record per line; floats are written by ``json`` (shortest round-trip
repr) so save followed by load reproduces every value bit-exactly. Writes go
through a .tmp file and an atomic rename.
"""

import json
import logging
from pathlib import Path
from typing import Iterable, TypeVar

from pydantic import BaseModel, ValidationError

from uqroute.pref_data import PreferenceDataset, PromptSet, split_counts
from uqroute.utils.errors import DatasetParseError, SchemaError
from uqroute.utils.models import DatasetManifest, PreferenceRecord, PromptManifest, PromptRecord

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"

ModelT = TypeVar("ModelT", bound=BaseModel)


def manifest_path(path: Path) -> Path:
    """Sidecar manifest location for a data file."""
    return path.with_name(path.name + MANIFEST_SUFFIX)


def _write_atomic(path: Path, lines: Iterable[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line)
            f.write("\n")
    tmp_path.replace(path)


def _write_manifest(path: Path, manifest: BaseModel) -> None:
    _write_atomic(manifest_path(path), [json.dumps(manifest.model_dump(mode="json"), indent=2)])


def _read_manifest(path: Path, model: type[ModelT]) -> ModelT:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        raise SchemaError(f"manifest not found next to {path}: expected {sidecar.name}")
    try:
        with open(sidecar, "r", encoding="utf-8") as f:
            return model.model_validate(json.load(f))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise SchemaError(f"invalid manifest {sidecar}: {exc}") from exc


def _read_records(path: Path, model: type[ModelT]) -> list[ModelT]:
    records: list[ModelT] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetParseError(str(path), line_number, f"invalid JSON: {exc.msg}") from exc
            except ValidationError as exc:
                first = exc.errors()[0]
                where = ".".join(str(p) for p in first["loc"])
                raise DatasetParseError(str(path), line_number, f"{where}: {first['msg']}") from exc
    return records


# ---------------------------------------------------------------------------
# Preference datasets
# ---------------------------------------------------------------------------


def save_dataset(dataset: PreferenceDataset, path: Path) -> Path:
    """Write records and manifest.

    Returns:
        Path of the record file.
    """
    _write_atomic(path, (json.dumps(r.model_dump(mode="json")) for r in dataset.records))
    manifest = dataset.manifest.model_copy(
        update={"count": len(dataset.records), "split_sizes": split_counts(dataset.records)}
    )
    _write_manifest(path, manifest)
    logger.info("Saved %s: %d records %s", path.name, len(dataset.records), manifest.split_sizes)
    return path


def load_dataset(path: Path) -> PreferenceDataset:
    """Read a dataset and check it against its manifest.

    Raises:
        FileNotFoundError: If the record file is missing.
        DatasetParseError: If a line is not a valid record (names the line).
        SchemaError: If the manifest is missing or disagrees with the records.
    """
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    manifest = _read_manifest(path, DatasetManifest)
    records = _read_records(path, PreferenceRecord)
    if len(records) != manifest.count:
        raise SchemaError(f"{path.name}: manifest count {manifest.count} but {len(records)} records")
    for record in records:
        if len(record.x_pair) != manifest.input_dim:
            raise SchemaError(
                f"{path.name}: record {record.id} has x_pair length {len(record.x_pair)}, "
                f"manifest implies {manifest.input_dim}"
            )
    if manifest.split_sizes:
        counts = split_counts(records)
        declared = {split: manifest.split_sizes.get(split, 0) for split in counts}
        if declared != counts or set(manifest.split_sizes) - set(counts):
            raise SchemaError(f"{path.name}: manifest split sizes {manifest.split_sizes} but records give {counts}")
    logger.info("Loaded %s: %d records", path.name, len(records))
    return PreferenceDataset(records, manifest)


# ---------------------------------------------------------------------------
# Prompt sets
# ---------------------------------------------------------------------------


def save_prompts(prompts: PromptSet, path: Path) -> Path:
    """Write a prompt set and its manifest."""
    _write_atomic(path, (json.dumps(r.model_dump(mode="json")) for r in prompts.records))
    _write_manifest(path, prompts.manifest.model_copy(update={"count": len(prompts.records)}))
    logger.info("Saved %s: %d prompts", path.name, len(prompts.records))
    return path


def load_prompts(path: Path) -> PromptSet:
    """Read a prompt set and check it against its manifest."""
    if not path.exists():
        raise FileNotFoundError(f"Prompt set not found: {path}")
    manifest = _read_manifest(path, PromptManifest)
    records = _read_records(path, PromptRecord)
    if len(records) != manifest.count:
        raise SchemaError(f"{path.name}: manifest count {manifest.count} but {len(records)} prompts")
    for record in records:
        if len(record.context) != manifest.context_dim:
            raise SchemaError(f"{path.name}: prompt {record.id} has context length {len(record.context)}")
        if len(record.candidates) != manifest.pool_size:
            raise SchemaError(f"{path.name}: prompt {record.id} has {len(record.candidates)} candidates")
        if any(len(c) != manifest.item_dim for c in record.candidates):
            raise SchemaError(f"{path.name}: prompt {record.id} has a candidate of the wrong length")
    logger.info("Loaded %s: %d prompts", path.name, len(records))
    return PromptSet(records, manifest)
