import json

import numpy as np
import pytest
import torch

from helpers import SMALL, TINY
from segrl.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from segrl.errors import CheckpointError
from segrl.policy import init_params


def _equal_trees(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return list(sa) == list(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.mark.parametrize("kind", ["segment", "global_baseline"])
def test_round_trip_is_bit_exact(tmp_path, kind):
    agent = init_params(SMALL, 4, kind)
    with torch.no_grad():
        agent.log_alpha.fill_(-1.2345678)
    save_checkpoint(agent, tmp_path / "ck", step=120, config_hash="h")
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert _equal_trees(agent, loaded)
    assert loaded.kind == kind and manifest["step"] == 120 and manifest["config_hash"] == "h"
    assert not any(p.requires_grad for p in loaded.critic_target.parameters())


def test_manifest_layout(tmp_path):
    agent = init_params(TINY, 0)
    save_checkpoint(agent, tmp_path)
    manifest = read_manifest(tmp_path)
    entries = manifest["entries"]
    assert len(entries) == len(agent.state_dict())
    cursor = 0
    for e, (name, t) in zip(entries, agent.state_dict().items()):
        assert e["name"] == name and e["dtype"] == "f32" and e["shape"] == list(t.shape)
        assert e["byte_offset"] == cursor
        cursor += t.numel() * 4
    assert cursor == manifest["payload_bytes"] == (tmp_path / "params.bin").stat().st_size
    # little-endian float32, in manifest order
    raw = np.fromfile(tmp_path / "params.bin", dtype="<f4")
    first = entries[0]
    n = int(np.prod(first["shape"]))
    np.testing.assert_array_equal(raw[:n], agent.state_dict()[first["name"]].numpy().ravel())


def test_truncated_payload_is_rejected(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path)
    blob = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path)


def test_corrupted_payload_is_rejected(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path)
    blob = bytearray((tmp_path / "params.bin").read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path)


def test_bad_manifest_is_rejected(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere")


def test_shape_mismatch_names_first_entry(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path)
    wider = TINY.__class__(**{**TINY.to_dict(), "proj_hidden_size": 12})
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path, arch=wider)
    first_bad = next(
        e["name"] for e in read_manifest(tmp_path)["entries"] if "head" in e["name"] and "in_norm" not in e["name"]
    )
    assert first_bad in str(err.value)


def test_name_mismatch_is_rejected(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["entries"][3]["name"] = "actor.bogus"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="actor.bogus"):
        load_checkpoint(tmp_path)


def test_overlapping_entries_are_rejected(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["entries"][2]["byte_offset"] = 0
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="overlaps"):
        load_checkpoint(tmp_path)


def test_kind_mismatch_is_rejected(tmp_path):
    save_checkpoint(init_params(TINY, 0), tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path, kind="global_baseline")
