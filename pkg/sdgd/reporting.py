"""
CSV and JSON result emission.

Every CSV gets a header row and a `<name>.csv.json` sidecar recording the
config hash, seed and code version. File names carry the config hash.
Nothing time-dependent is written, so a re-run with the same config and
seed reproduces the files byte for byte.
"""
import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

from pydantic import BaseModel

logger = logging.getLogger(__name__)


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode='json', by_alias=True), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return value


class ResultWriter:
    """Writes one command's outputs into `out_dir`, named `<stem>-<config hash>.<ext>`."""

    def __init__(self, out_dir, cfg_hash: str, seed: int, code_version: str):
        self.out_dir = Path(out_dir)
        self.cfg_hash = cfg_hash
        self.seed = seed
        self.code_version = code_version

    def path(self, stem: str, ext: str) -> Path:
        return self.out_dir / f"{stem}-{self.cfg_hash}.{ext}"

    def meta(self, extra: Optional[dict] = None) -> dict:
        meta = {'config_hash': self.cfg_hash, 'seed': self.seed, 'code_version': self.code_version}
        if extra:
            meta.update(extra)
        return meta

    def csv(self, stem: str, header: Sequence[str], rows: Iterable[Sequence], extra: Optional[dict] = None) -> Path:
        path = self.path(stem, 'csv')
        path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with open(path, 'w', encoding='utf-8', newline='') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
                count += 1
        sidecar = path.with_name(path.name + '.json')
        sidecar.write_text(json.dumps(self.meta(extra), indent=2, sort_keys=True) + '\n', encoding='utf-8')
        logger.info(f"✓ Wrote {count} rows to {path}")
        return path

    def json(self, stem: str, payload, extra: Optional[dict] = None) -> Path:
        if isinstance(payload, BaseModel):
            payload = payload.model_dump(mode='json')
        path = self.path(stem, 'json')
        path.parent.mkdir(parents=True, exist_ok=True)
        document = {'meta': self.meta(extra), 'result': payload}
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n', encoding='utf-8')
        logger.info(f"✓ Wrote {path}")
        return path
