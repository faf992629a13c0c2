import numpy as np
import pytest
from scipy.io import wavfile

from cofkey.audio_io import (
    AudioIOError,
    load_audio,
    mixdown,
    resample,
    save_wav,
)
from cofkey import flac
from cofkey.flac import (
    FlacError,
    _BitReader,
    _BitWriter,
    _crc8,
    _crc16,
    _read_utf8_number,
    _write_utf8_number,
    read_flac,
    write_flac,
)


# ---------------------------------------------------------------------------
# WAV


def test_wav_round_trip_is_16bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 22050) * 0.9
    p = tmp_path / "a.wav"
    save_wav(p, x, 22050)
    y, sr = load_audio(p)
    assert sr == 22050
    assert len(y) == len(x)
    # quantization to int16 (scale 32767) read back over the 32768 grid:
    # error is at most (0.5 + |x|) / 32768
    assert float(np.abs(x - y).max()) <= 1.5 / 32768.0


def test_wav_clips_out_of_range(tmp_path):
    p = tmp_path / "a.wav"
    save_wav(p, np.array([2.0, -2.0]), 8000)
    y, _ = load_audio(p)
    assert y[0] == pytest.approx(1.0, abs=1e-4)
    assert y[1] == pytest.approx(-1.0, abs=1e-4)


def test_wav_stereo_mixdown(tmp_path):
    p = tmp_path / "s.wav"
    stereo = np.stack([np.full(100, 0.5), np.full(100, -0.5)], axis=1)
    wavfile.write(str(p), 8000, (stereo * 32767).astype(np.int16))
    y, sr = load_audio(p)
    assert y.ndim == 1
    assert np.abs(y).max() < 1e-4  # channels cancel


def test_wav_float32_and_uint8_dtypes(tmp_path):
    p32 = tmp_path / "f32.wav"
    wavfile.write(str(p32), 8000, np.array([0.25, -0.75], dtype=np.float32))
    y, _ = load_audio(p32)
    assert np.allclose(y, [0.25, -0.75])

    pu8 = tmp_path / "u8.wav"
    wavfile.write(str(pu8), 8000, np.array([128, 255, 0], dtype=np.uint8))
    y, _ = load_audio(pu8)
    assert y[0] == 0.0 and y[1] > 0.9 and y[2] == -1.0


def test_wav_int32_dtype(tmp_path):
    p = tmp_path / "i32.wav"
    wavfile.write(str(p), 8000, np.array([2**30, -(2**31)], dtype=np.int32))
    y, _ = load_audio(p)
    assert y[0] == pytest.approx(0.5)
    assert y[1] == pytest.approx(-1.0)


def test_unsupported_suffix(tmp_path):
    p = tmp_path / "a.mp3"
    p.write_bytes(b"xxxx")
    with pytest.raises(AudioIOError, match="unsupported audio format"):
        load_audio(p)


def test_missing_file(tmp_path):
    with pytest.raises(AudioIOError, match="not found"):
        load_audio(tmp_path / "nothing.wav")


# ---------------------------------------------------------------------------
# mixdown / resample


def test_mixdown_passthrough_and_mean():
    mono = np.arange(5.0)
    assert mixdown(mono) is mono
    st = np.stack([np.ones(4), np.zeros(4)], axis=1)
    assert np.allclose(mixdown(st), 0.5)
    with pytest.raises(AudioIOError):
        mixdown(np.zeros((2, 2, 2)))


def test_resample_identity_and_rate_change():
    x = np.sin(2 * np.pi * 440 * np.arange(44100) / 44100)
    assert resample(x, 22050, 22050) is x
    y = resample(x, 44100, 22050)
    assert len(y) == 22050
    # the 440 Hz tone survives: correlate with the ideal resampled tone
    t = np.arange(len(y)) / 22050
    ref = np.sin(2 * np.pi * 440 * t)
    r = np.corrcoef(y[200:-200], ref[200:-200])[0, 1]
    assert r > 0.99


# ---------------------------------------------------------------------------
# FLAC: whole-file round trips through the public API


@pytest.mark.parametrize("mode", ["verbatim", "fixed2"])
def test_flac_round_trip_mono(tmp_path, mode):
    rng = np.random.default_rng(1)
    x = (rng.uniform(-1, 1, 5000) * 20000).astype(np.int16)
    p = tmp_path / "m.flac"
    write_flac(p, x, 22050, subframe_mode=mode, blocksize=1024)
    got, sr, bits = read_flac(p)
    assert sr == 22050 and bits == 16
    assert got.shape == (5000, 1)
    assert np.array_equal(got[:, 0], x.astype(np.int32))


@pytest.mark.parametrize("mode", ["verbatim", "fixed2"])
def test_flac_round_trip_stereo(tmp_path, mode):
    rng = np.random.default_rng(2)
    x = (rng.uniform(-1, 1, (3000, 2)) * 10000).astype(np.int16)
    p = tmp_path / "s.flac"
    write_flac(p, x, 44100, subframe_mode=mode, blocksize=512)
    got, sr, bits = read_flac(p)
    assert sr == 44100
    assert np.array_equal(got, x.astype(np.int32))


def test_flac_fixed2_smooth_signal(tmp_path):
    # a smooth signal compresses with order-2 prediction and survives exactly
    n = 4096
    t = np.arange(n) / 22050
    x = (np.sin(2 * np.pi * 220 * t) * 15000).astype(np.int16)
    p = tmp_path / "tone.flac"
    write_flac(p, x, 22050, subframe_mode="fixed2")
    got, _, _ = read_flac(p)
    assert np.array_equal(got[:, 0], x.astype(np.int32))
    assert p.stat().st_size < 2 * n  # better than raw 16-bit PCM


def test_load_audio_flac_scaling(tmp_path):
    x = np.array([16384, -16384, 0], dtype=np.int16)
    p = tmp_path / "x.flac"
    write_flac(p, x, 8000)
    y, sr = load_audio(p)
    assert sr == 8000
    assert np.allclose(y, [0.5, -0.5, 0.0])


def test_flac_writer_rejects_bad_input(tmp_path):
    with pytest.raises(FlacError):
        write_flac(tmp_path / "a.flac", np.zeros(4, dtype=np.float32), 8000)
    with pytest.raises(FlacError):
        write_flac(tmp_path / "a.flac", np.zeros((4, 9), dtype=np.int16), 8000)
    with pytest.raises(FlacError):
        write_flac(tmp_path / "a.flac", np.zeros(4, dtype=np.int16), 8000,
                   subframe_mode="lpc")


def test_flac_reader_rejects_garbage(tmp_path):
    p = tmp_path / "bad.flac"
    p.write_bytes(b"RIFFxxxx")
    with pytest.raises(FlacError, match="bad magic"):
        read_flac(p)
    p.write_bytes(b"fLaC")
    with pytest.raises(FlacError, match="truncated"):
        read_flac(p)


# ---------------------------------------------------------------------------
# FLAC: bit-level units


def test_crc8_standard_check_value():
    # CRC-8, poly 0x07, init 0: published check value for "123456789"
    assert _crc8(b"123456789") == 0xF4


def test_crc16_standard_check_value():
    # CRC-16/UMTS, poly 0x8005, init 0, no reflection
    assert _crc16(b"123456789") == 0xFEE8


@pytest.mark.parametrize("v", [0, 1, 0x7F, 0x80, 0x7FF, 0x800, 0xFFFF,
                               0x10000, 0x1FFFFF, 2**30])
def test_utf8_number_round_trip(v):
    bw = _BitWriter()
    _write_utf8_number(bw, v)
    br = _BitReader(bw.getvalue())
    assert _read_utf8_number(br) == v


def test_bit_reader_writer_round_trip_signed():
    bw = _BitWriter()
    values = [(-5, 5), (15, 5), (-32768, 16), (32767, 16), (0, 3)]
    for v, bits in values:
        bw.write_int(v, bits)
    bw.align_byte()
    br = _BitReader(bw.getvalue())
    for v, bits in values:
        assert br.read_int(bits) == v


# ---------------------------------------------------------------------------
# FLAC: hand-built frames exercise decoder paths the writer never produces


def _streaminfo(blocksize, sample_rate, nch, bps, total):
    si = _BitWriter()
    si.write_uint(blocksize, 16)
    si.write_uint(blocksize, 16)
    si.write_uint(0, 24)
    si.write_uint(0, 24)
    si.write_uint(sample_rate, 20)
    si.write_uint(nch - 1, 3)
    si.write_uint(bps - 1, 5)
    si.write_uint(total, 36)
    body = si.getvalue() + b"\x00" * 16  # md5 unchecked
    out = bytearray(b"fLaC")
    out.append(0x80)
    out += len(body).to_bytes(3, "big")
    out += body
    return out


def _frame_header(blocksize, sample_rate, ch_code):
    bw = _BitWriter()
    bw.write_uint(0x3FFE, 14)
    bw.write_uint(0, 1)
    bw.write_uint(0, 1)
    bw.write_uint(7, 4)        # 16-bit blocksize-1 follows
    bw.write_uint(13, 4)       # 16-bit sample rate follows
    bw.write_uint(ch_code, 4)
    bw.write_uint(4, 3)        # 16 bps
    bw.write_uint(0, 1)
    _write_utf8_number(bw, 0)
    bw.write_uint(blocksize - 1, 16)
    bw.write_uint(sample_rate, 16)
    bw.write_uint(0, 8)        # header CRC (not verified by the reader)
    return bw


def _finish_frame(tmp_path, name, header_bits, nch, blocksize, total):
    header_bits.align_byte()
    header_bits.write_uint(0, 16)  # frame CRC (not verified)
    data = _streaminfo(blocksize, 8000, nch, 16, total) + header_bits.getvalue()
    p = tmp_path / name
    p.write_bytes(bytes(data))
    return p


def _write_rice(bw, residuals, param):
    bw.write_uint(0, 2)   # method 0: 4-bit params
    bw.write_uint(0, 4)   # partition order 0
    bw.write_uint(param, 4)
    for r in residuals:
        u = (r << 1) if r >= 0 else ((-r) << 1) - 1
        q, low = divmod(u, 1 << param)
        for _ in range(q):
            bw.write_uint(0, 1)
        bw.write_uint(1, 1)
        if param:
            bw.write_uint(low, param)


def test_hand_built_lpc_subframe(tmp_path):
    # order-2 LPC, coeffs [2, -1], shift 0, warmup [3, 5], residuals [1, -2]:
    #   s2 = 2*5 - 3 + 1 = 8;  s3 = 2*8 - 5 - 2 = 9
    bw = _frame_header(4, 8000, ch_code=0)
    bw.write_uint(0, 1)
    bw.write_uint(0x20 | 1, 6)   # LPC, order 2
    bw.write_uint(0, 1)          # no wasted bits
    bw.write_int(3, 16)
    bw.write_int(5, 16)
    bw.write_uint(14, 4)         # precision 15
    bw.write_uint(0, 5)          # shift 0
    bw.write_int(2, 15)
    bw.write_int(-1, 15)
    _write_rice(bw, [1, -2], param=2)
    p = _finish_frame(tmp_path, "lpc.flac", bw, 1, 4, 4)
    got, _, _ = read_flac(p)
    assert got[:, 0].tolist() == [3, 5, 8, 9]


def test_hand_built_left_side_stereo(tmp_path):
    # ch_code 8: left/side; right = left - side
    bw = _frame_header(2, 8000, ch_code=8)
    bw.write_uint(0, 1); bw.write_uint(1, 6); bw.write_uint(0, 1)
    bw.write_int(100, 16); bw.write_int(200, 16)
    bw.write_uint(0, 1); bw.write_uint(1, 6); bw.write_uint(0, 1)
    bw.write_int(30, 17); bw.write_int(-40, 17)   # side gets bps+1
    p = _finish_frame(tmp_path, "ls.flac", bw, 2, 2, 2)
    got, _, _ = read_flac(p)
    assert got.tolist() == [[100, 70], [200, 240]]


def test_hand_built_right_side_stereo(tmp_path):
    # ch_code 9: side/right; left = right + side
    bw = _frame_header(2, 8000, ch_code=9)
    bw.write_uint(0, 1); bw.write_uint(1, 6); bw.write_uint(0, 1)
    bw.write_int(12, 17); bw.write_int(-7, 17)    # side first, bps+1
    bw.write_uint(0, 1); bw.write_uint(1, 6); bw.write_uint(0, 1)
    bw.write_int(50, 16); bw.write_int(60, 16)
    p = _finish_frame(tmp_path, "rs.flac", bw, 2, 2, 2)
    got, _, _ = read_flac(p)
    assert got.tolist() == [[62, 50], [53, 60]]


def test_hand_built_mid_side_stereo(tmp_path):
    # ch_code 10: mid/side with l=54, r=47 -> side=7, mid=(54+47)>>1=50
    bw = _frame_header(1, 8000, ch_code=10)
    bw.write_uint(0, 1); bw.write_uint(1, 6); bw.write_uint(0, 1)
    bw.write_int(50, 16)
    bw.write_uint(0, 1); bw.write_uint(1, 6); bw.write_uint(0, 1)
    bw.write_int(7, 17)
    p = _finish_frame(tmp_path, "ms.flac", bw, 2, 1, 1)
    got, _, _ = read_flac(p)
    assert got.tolist() == [[54, 47]]


def test_hand_built_constant_subframe_with_wasted_bits(tmp_path):
    # constant subframe, one wasted bit: decoded value is shifted left once
    bw = _frame_header(3, 8000, ch_code=0)
    bw.write_uint(0, 1)
    bw.write_uint(0, 6)          # constant
    bw.write_uint(1, 1)          # wasted-bits flag
    # unary count: already 1 + read_unary(); zero further zeros -> wasted = 1
    bw.write_uint(1, 1)
    bw.write_int(21, 15)         # bps reduced by wasted
    p = _finish_frame(tmp_path, "const.flac", bw, 1, 3, 3)
    got, _, _ = read_flac(p)
    assert got[:, 0].tolist() == [42, 42, 42]


def test_hand_built_partitioned_residual(tmp_path):
    # fixed order 1, blocksize 4, partition order 1 (two partitions):
    # partition sizes are 4/2 - 1 = 1 and 2 residuals
    bw = _frame_header(4, 8000, ch_code=0)
    bw.write_uint(0, 1)
    bw.write_uint(8 + 1, 6)      # fixed, order 1
    bw.write_uint(0, 1)
    bw.write_int(10, 16)         # warmup
    bw.write_uint(0, 2)          # method 0
    bw.write_uint(1, 4)          # partition order 1
    # partition 1: param 0, one residual +3 -> unary(6)+stop
    bw.write_uint(0, 4)
    for _ in range(6):
        bw.write_uint(0, 1)
    bw.write_uint(1, 1)
    # partition 2: escape (param 15), raw 5-bit residuals -4 and 2
    bw.write_uint(15, 4)
    bw.write_uint(5, 5)
    bw.write_int(-4, 5)
    bw.write_int(2, 5)
    p = _finish_frame(tmp_path, "part.flac", bw, 1, 4, 4)
    got, _, _ = read_flac(p)
    # s0=10; s1=10+3=13; s2=13-4=9; s3=9+2=11
    assert got[:, 0].tolist() == [10, 13, 9, 11]
