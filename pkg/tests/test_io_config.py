import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from captnet import io as cio
from captnet.analysis import perturb
from captnet.config import ConfigError, RunConfig, emit_config, parse_config
from captnet.model import CaptNetConfig, build, forward
from captnet.tensor import Tensor


@pytest.fixture(scope="module")
def model():
    m = build(CaptNetConfig(), seed=0)
    perturb(m, np.random.default_rng(0), scale=0.05)
    return m


@pytest.fixture(scope="module")
def image():
    return Tensor(np.random.default_rng(1).random((1, 3, 16, 16), dtype=np.float32))


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(model, image, tmp_path):
    path = tmp_path / "m.ckpt"
    cio.save_checkpoint(model, path)
    fresh = cio.load_checkpoint(path, build(CaptNetConfig(), seed=99))
    a, b = model.named_parameters(), fresh.named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert np.array_equal(forward(model, image).data, forward(fresh, image).data)


def test_checkpoint_layout(model):
    buf = cio.checkpoint_bytes(model.named_parameters())
    assert buf[:8] == b"CAPTCKPT"
    version, count = struct.unpack("<II", buf[8:16])
    assert version == 1 and count == len(model.named_parameters())
    (nlen,) = struct.unpack("<H", buf[16:18])
    first = buf[18:18 + nlen].decode()
    assert first == min(model.named_parameters())
    assert list(cio.parse_checkpoint(buf)) == sorted(model.named_parameters())


def test_corrupt_payload_byte_changes_output(model, image):
    buf = bytearray(cio.checkpoint_bytes(model.named_parameters()))
    # last byte is the high byte of the final float of the last entry
    buf[-1] ^= 0x01
    other = cio.load_into(build(CaptNetConfig(), seed=0), cio.parse_checkpoint(bytes(buf)))
    assert not np.array_equal(forward(model, image).data, forward(other, image).data)


def test_load_into_different_width_names_parameter(model):
    entries = cio.parse_checkpoint(cio.checkpoint_bytes(model.named_parameters()))
    with pytest.raises(cio.FormatError, match="shape mismatch for dec.0.0"):
        cio.load_into(build(CaptNetConfig(width=4), seed=0), entries)


def test_load_into_missing_and_extra(model):
    entries = cio.parse_checkpoint(cio.checkpoint_bytes(model.named_parameters()))
    no_ffm = build(CaptNetConfig(ffm=False), seed=0)
    with pytest.raises(cio.FormatError, match="unexpected parameter ffm"):
        cio.load_into(no_ffm, entries)
    with pytest.raises(cio.FormatError, match="missing parameter ffm"):
        cio.load_into(model, cio.parse_checkpoint(cio.checkpoint_bytes(no_ffm.named_parameters())))


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b[:-1], "truncated"),
    (lambda b: b[:12], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b"CAPTCKPX" + b[8:], "magic"),
    (lambda b: b[:8] + struct.pack("<I", 2) + b[12:], "version"),
])
def test_malformed_checkpoints(model, mutate, match):
    buf = cio.checkpoint_bytes(model.named_parameters())
    with pytest.raises(cio.FormatError, match=match):
        cio.parse_checkpoint(mutate(buf))


def test_prompt_toggle_keeps_checkpoint_compatible(model):
    before = cio.checkpoint_bytes(model.named_parameters())
    model.set_prompts_enabled(False)
    try:
        assert cio.checkpoint_bytes(model.named_parameters()) == before
    finally:
        model.set_prompts_enabled(True)


# ----------------------------------------------------------------------------
# PPM
# ----------------------------------------------------------------------------

def test_ppm_half_rounds_up(tmp_path):
    path = tmp_path / "x.ppm"
    cio.write_ppm(path, np.full((3, 4, 5), 0.5, dtype=np.float32))
    back = cio.read_ppm(path)
    assert back.shape == (3, 4, 5)
    assert np.array_equal(back, np.full((3, 4, 5), np.float32(128 / 255)))


def test_ppm_header():
    buf = cio.encode_ppm(np.zeros((3, 2, 3)))
    assert buf.startswith(b"P6\n3 2\n255\n")
    assert len(buf) == len(b"P6\n3 2\n255\n") + 18


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 9), w=st.integers(1, 9))
def test_ppm_round_trip_within_half_step(seed, h, w):
    x = np.random.default_rng(seed).random((3, h, w)).astype(np.float32)
    back = cio.decode_ppm(cio.encode_ppm(x))
    assert np.abs(back - x).max() <= 0.5 / 255 + 1e-7


@pytest.mark.parametrize("buf", [
    b"P5\n2 2\n255\n" + bytes(4),
    b"P6\n2 2\n65535\n" + bytes(24),
    b"P6\n2 2\n255\n" + bytes(11),
    b"P6\n2 2\n255\n" + bytes(13),
    b"P6\n2\n",
    b"",
])
def test_ppm_rejects_malformed(buf):
    with pytest.raises(cio.FormatError):
        cio.decode_ppm(buf)


def test_ppm_header_comments_are_skipped():
    buf = b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 255, 51])
    np.testing.assert_allclose(cio.decode_ppm(buf)[:, 0, 0], [0.0, 1.0, 0.2], atol=1e-7)


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    rows = [("0000", "B", 17, "clean/0000.ppm", "degraded/0000.ppm")]
    cio.write_csv(tmp_path / "manifest.csv", cio.MANIFEST_FIELDS, rows)
    text = (tmp_path / "manifest.csv").read_text()
    assert text.splitlines()[0] == "sample_id,label,seed,clean_path,degraded_path"
    (row,) = cio.read_manifest(tmp_path / "manifest.csv")
    assert row.sample_id == "0000" and row.label == "B" and row.seed == 17
    assert row.clean_path == tmp_path / "clean/0000.ppm"


def test_fmt_round_trips_floats():
    for v in (0.1, 1 / 3, 99.99, -6.020599913279624):
        assert float(cio.fmt(v)) == v


# ----------------------------------------------------------------------------
# config
# ----------------------------------------------------------------------------

def test_empty_train_section_gives_defaults():
    cfg = parse_config("[train]\n")
    assert cfg == RunConfig()
    t = cfg.train_config()
    assert (t.lr_init, t.lr_final, t.total_iters, t.patch_size, t.batch_size) == (5e-4, 1e-7, 2000, 32, 4)
    assert cfg.model_config() == CaptNetConfig()


def test_patch_not_multiple_of_eight():
    with pytest.raises(ConfigError) as info:
        parse_config("[train]\n\n# comment\npatch = 33\n")
    assert info.value.line == 4


@pytest.mark.parametrize("text,line", [
    ("[train]\nlearning_rate = 1\n", 2),
    ("[training]\n", 1),
    ("[train]\niters = many\n", 2),
    ("[train]\nseed = 1\nseed = 2\n", 3),
    ("iters = 3\n", 1),
    ("[model]\nprompts = encoder:1\n", 2),
    ("[model]\nffm = maybe\n", 2),
    ("[data]\nsize = 12\n", 2),
])
def test_config_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line


def test_invalid_architecture_reported():
    with pytest.raises(ConfigError):
        parse_config("[model]\nwidth = 8\nheads = 1,2,3,8\n")


def test_config_round_trip_examples():
    text = """
    [model]
    width = 4
    enc_blocks = 1,1,1,1
    prompts = none
    ffm = false
    [train]
    lr = 5e-5
    iters = 10
    augment = no
    [data]
    n_per_task = 3
    size = 48
    [io]
    out = results/run1
    """
    cfg = parse_config(text)
    assert cfg.model.prompts == () and cfg.model.ffm is False and cfg.train.augment is False
    assert parse_config(emit_config(cfg)) == cfg
    assert cfg.model_config().prompt_positions == frozenset()


@settings(max_examples=40, deadline=None)
@given(
    width=st.sampled_from([4, 8, 16]),
    iters=st.integers(0, 10**6),
    patch=st.sampled_from([8, 16, 24, 32]),
    lr=st.floats(1e-6, 1e-1),
    sigma=st.floats(0.0, 1.0),
    prompts=st.sets(st.sampled_from([("decoder", 3), ("decoder", 4), ("encoder", 3), ("encoder", 4)])),
    out=st.text(alphabet="abcxyz/_-.0123", min_size=1, max_size=12),
)
def test_emit_parse_round_trip(width, iters, patch, lr, sigma, prompts, out):
    cfg = RunConfig()
    cfg.model.width = width
    cfg.model.prompts = tuple(sorted(prompts))
    cfg.train.iters = iters
    cfg.train.patch = patch
    cfg.train.lr = lr
    cfg.train.lr_final = lr / 10
    cfg.data.noise_sigma = sigma
    cfg.io.out = out
    again = parse_config(emit_config(cfg))
    assert again == cfg
    assert emit_config(again) == emit_config(cfg)
