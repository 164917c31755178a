"""Portable checkpoint container: JSON manifest plus one little-endian f32 blob.

Layout of a checkpoint directory::

    manifest.json   format, agent kind, arch, config hash, step counter,
                    payload size and sha256, and one entry per parameter
    params.bin      parameters back to back in manifest order

Entry names follow the module tree of :class:`segrl.policy.Agent`:
``actor.*``, ``critic.q1.*``, ``critic.q2.*``, ``critic_target.q1.*``,
``critic_target.q2.*`` and ``log_alpha``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError
from .policy import Agent, ArchConfig

FORMAT = "segrl.checkpoint/1"
MANIFEST = "manifest.json"
PAYLOAD = "params.bin"
_DTYPE = np.dtype("<f4")


def _named_arrays(agent: Agent) -> list[tuple[str, np.ndarray]]:
    return [(name, t.detach().cpu().numpy().astype(_DTYPE)) for name, t in agent.state_dict().items()]


def save_checkpoint(agent: Agent, path, step: int = 0, config_hash: str = "", extra: dict | None = None) -> Path:
    """Write ``agent`` to directory ``path`` atomically; returns the path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in _named_arrays(agent):
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "byte_offset": offset})
        raw = np.ascontiguousarray(arr).tobytes()
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "agent_kind": agent.kind,
        "arch": agent.arch.to_dict(),
        "config_hash": config_hash,
        "step": int(step),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "entries": entries,
        "extra": extra or {},
    }
    tmp_payload = path / (PAYLOAD + ".tmp")
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_payload.write_bytes(payload)
    tmp_manifest.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp_payload, path / PAYLOAD)
    os.replace(tmp_manifest, path / MANIFEST)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no {MANIFEST}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} manifest")
    for key in ("agent_kind", "arch", "step", "payload_bytes", "payload_sha256", "entries"):
        if key not in manifest:
            raise CheckpointError(f"{path}: manifest lacks {key!r}")
    return manifest


def _check_layout(entries: list, payload_bytes: int) -> None:
    cursor = 0
    for entry in entries:
        name = entry.get("name", "?")
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"entry {name}: dtype {entry.get('dtype')!r} is not f32")
        size = int(np.prod(entry["shape"], dtype=np.int64)) * _DTYPE.itemsize
        start = entry["byte_offset"]
        if start < cursor:
            raise CheckpointError(f"entry {name}: overlaps the previous entry")
        if start + size > payload_bytes:
            raise CheckpointError(f"entry {name}: extends past the payload end")
        cursor = start + size


def load_checkpoint(path, arch: ArchConfig | None = None, kind: str | None = None) -> tuple[Agent, dict]:
    """Rebuild the Agent stored at ``path``.

    When ``arch``/``kind`` are given the stored layout must match them; the
    first mismatching entry is named in the error. Nothing is loaded unless
    the whole payload verifies.
    """
    path = Path(path)
    manifest = read_manifest(path)
    try:
        payload = (path / PAYLOAD).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no {PAYLOAD}") from exc
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']} (truncated or padded)"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch")
    entries = manifest["entries"]
    _check_layout(entries, len(payload))

    try:
        stored_arch = ArchConfig(**manifest["arch"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad arch in manifest ({exc})") from exc
    kind = kind or manifest["agent_kind"]
    if kind != manifest["agent_kind"]:
        raise CheckpointError(f"{path}: stores a {manifest['agent_kind']} agent, expected {kind}")
    agent = Agent(arch or stored_arch, kind)
    expected = agent.state_dict()

    names = [e["name"] for e in entries]
    for name, entry in zip(names, entries):
        if name not in expected:
            raise CheckpointError(f"entry {name}: not a parameter of the current architecture")
        if tuple(entry["shape"]) != tuple(expected[name].shape):
            raise CheckpointError(
                f"entry {name}: shape {tuple(entry['shape'])} != expected {tuple(expected[name].shape)}"
            )
    for name in expected:
        if name not in names:
            raise CheckpointError(f"entry {name}: missing from checkpoint")

    state = {}
    for entry in entries:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry["byte_offset"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
    agent.load_state_dict(state)
    return agent, manifest
