import pytest
import yaml

TINY_MODEL = {"latent_channels": 48, "patch": 4, "channels": [4, 4], "ctx_dim": 10, "attn_dim": 4,
              "temb_dim": 8, "time_freqs": 2, "n_lights": 16, "pe_freqs": 1, "tok_hidden": 4,
              "image_size": 16, "ref_grid": 2, "ref_channels": [4, 4]}

TINY_CONFIG = {
    "rig": {"preset": "desk", "dims": [8, 16]},
    "dataset": {"rig": "desk", "env_dims": [8, 16], "size": 16, "scenes": 1, "frames": 3, "fixture": True},
    "train": {"rig": "desk", "env_dims": [8, 16], "batch": 2, "lr": 0.01, "model": TINY_MODEL,
              "stages": [{"name": "warmup", "steps": 3, "frames": 2},
                         {"name": "temporal", "steps": 2, "frames": 2}]},
    "pipeline": {"rig": "desk", "env_dims": [8, 16], "steps": 3, "window": 2, "overlap": 1},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return path


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""
    def record(n, ok, detail):
        _ACCEPTANCE.append((n, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
