import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping


def hash_bytes(b: bytes) -> str:
    """Gera hash único para conteúdo"""
    return hashlib.sha256(b).hexdigest()[:16]


def hash_file(p: Path) -> str:
    return hash_bytes(Path(p).read_bytes())


def atomic_write_bytes(dest: Path, data: bytes) -> Path:
    """Grava arquivo via temporário + rename (sem artefato parcial)"""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=f".{dest.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, dest)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return dest


def atomic_write_text(dest: Path, text: str) -> Path:
    return atomic_write_bytes(dest, text.encode("utf-8"))


def dumps_record(record: Mapping) -> str:
    """JSON canônico (chaves ordenadas) para registros auditáveis"""
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_jsonl(dest: Path, records: Iterable[Mapping]) -> Path:
    """Grava um registro JSON por linha"""
    return atomic_write_text(dest, "".join(dumps_record(r) + "\n" for r in records))


def read_jsonl(p: Path) -> list[dict]:
    """Carrega registros JSON por linha"""
    text = Path(p).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_json(dest: Path, obj: Mapping) -> Path:
    return atomic_write_text(dest, json.dumps(obj, indent=2, sort_keys=True))


def read_json(p: Path) -> dict:
    return json.loads(Path(p).read_text(encoding="utf-8"))
