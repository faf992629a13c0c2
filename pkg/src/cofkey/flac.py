"""Minimal FLAC reader/writer (pure Python, numpy output).

Reader covers the subset needed to ingest ordinary FLAC files: STREAMINFO,
constant/verbatim/fixed/LPC subframes, Rice residuals (both coding methods,
escape partitions), independent and left/right/mid-side stereo, wasted bits,
8/16/24-bit depths. Frame CRCs are parsed but not verified. Writer emits
valid files with verbatim or fixed-order-2 subframes (16-bit PCM only) and is
used to build test fixtures.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


class FlacError(ValueError):
    pass


_BLOCKSIZE_TABLE = {
    1: 192, 2: 576, 3: 1152, 4: 2304, 5: 4608,
    8: 256, 9: 512, 10: 1024, 11: 2048, 12: 4096,
    13: 8192, 14: 16384, 15: 32768,
}
_SAMPLERATE_TABLE = {
    1: 88200, 2: 176400, 3: 192000, 4: 8000, 5: 16000, 6: 22050,
    7: 24000, 8: 32000, 9: 44100, 10: 48000, 11: 96000,
}
_SAMPLESIZE_TABLE = {1: 8, 2: 12, 4: 16, 5: 20, 6: 24, 7: 32}

_FIXED_COEFFS = {
    0: [],
    1: [1],
    2: [2, -1],
    3: [3, -3, 1],
    4: [4, -6, 4, -1],
}


class _BitReader:
    def __init__(self, data: bytes, pos_byte: int = 0):
        self.data = data
        self.pos = pos_byte * 8  # absolute bit position

    def read_uint(self, nbits: int) -> int:
        v = 0
        p = self.pos
        data = self.data
        for _ in range(nbits):
            byte = data[p >> 3]
            v = (v << 1) | ((byte >> (7 - (p & 7))) & 1)
            p += 1
        self.pos = p
        return v

    def read_int(self, nbits: int) -> int:
        v = self.read_uint(nbits)
        if v >= (1 << (nbits - 1)):
            v -= 1 << nbits
        return v

    def read_unary(self) -> int:
        n = 0
        while self.read_uint(1) == 0:
            n += 1
        return n

    def align_byte(self) -> None:
        self.pos = (self.pos + 7) & ~7

    def byte_pos(self) -> int:
        return self.pos >> 3


class _BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nacc = 0

    def write_uint(self, v: int, nbits: int) -> None:
        if nbits == 0:
            return
        self.acc = (self.acc << nbits) | (v & ((1 << nbits) - 1))
        self.nacc += nbits
        while self.nacc >= 8:
            self.nacc -= 8
            self.buf.append((self.acc >> self.nacc) & 0xFF)
        self.acc &= (1 << self.nacc) - 1

    def write_int(self, v: int, nbits: int) -> None:
        self.write_uint(v & ((1 << nbits) - 1), nbits)

    def write_unary(self, n: int) -> None:
        for _ in range(n):
            self.write_uint(0, 1)
        self.write_uint(1, 1)

    def align_byte(self) -> None:
        if self.nacc:
            self.write_uint(0, 8 - self.nacc)

    def getvalue(self) -> bytes:
        assert self.nacc == 0
        return bytes(self.buf)


def _crc8(data: bytes) -> int:
    crc = 0
    for b in data:
        crc ^= b
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
    return crc


def _crc16(data: bytes) -> int:
    crc = 0
    for b in data:
        crc ^= b << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x8005) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
    return crc


def _read_utf8_number(br: _BitReader) -> int:
    first = br.read_uint(8)
    if first < 0x80:
        return first
    nbytes = 0
    mask = 0x80
    while first & mask:
        nbytes += 1
        mask >>= 1
    if nbytes < 2 or nbytes > 7:
        raise FlacError("bad UTF-8 coded number in frame header")
    v = first & (0xFF >> (nbytes + 1))
    for _ in range(nbytes - 1):
        b = br.read_uint(8)
        if (b & 0xC0) != 0x80:
            raise FlacError("bad UTF-8 continuation byte in frame header")
        v = (v << 6) | (b & 0x3F)
    return v


def _write_utf8_number(bw: _BitWriter, v: int) -> None:
    if v < 0x80:
        bw.write_uint(v, 8)
        return
    nbytes = 2
    while v >= (1 << (5 * nbytes + 1)) and nbytes < 7:
        nbytes += 1
    lead_payload = 7 - nbytes
    lead = (0xFF << (8 - nbytes)) & 0xFF
    bw.write_uint(lead | ((v >> (6 * (nbytes - 1))) & ((1 << lead_payload) - 1)), 8)
    for i in range(nbytes - 2, -1, -1):
        bw.write_uint(0x80 | ((v >> (6 * i)) & 0x3F), 8)


def _read_residual(br: _BitReader, blocksize: int, order: int) -> np.ndarray:
    method = br.read_uint(2)
    if method not in (0, 1):
        raise FlacError(f"unknown residual coding method {method}")
    param_bits = 4 if method == 0 else 5
    escape = (1 << param_bits) - 1
    part_order = br.read_uint(4)
    nparts = 1 << part_order
    if blocksize % nparts:
        raise FlacError("partition order does not divide block size")
    out = np.empty(blocksize - order, dtype=np.int64)
    idx = 0
    for part in range(nparts):
        n = blocksize // nparts - (order if part == 0 else 0)
        param = br.read_uint(param_bits)
        if param == escape:
            raw_bits = br.read_uint(5)
            for i in range(n):
                out[idx] = br.read_int(raw_bits) if raw_bits else 0
                idx += 1
        else:
            for i in range(n):
                q = br.read_unary()
                u = (q << param) | (br.read_uint(param) if param else 0)
                out[idx] = (u >> 1) ^ -(u & 1)  # unzigzag
                idx += 1
    return out


def _decode_subframe(br: _BitReader, blocksize: int, bps: int) -> np.ndarray:
    if br.read_uint(1) != 0:
        raise FlacError("bad subframe header padding bit")
    sftype = br.read_uint(6)
    wasted = 0
    if br.read_uint(1):
        wasted = 1 + br.read_unary()
    bps -= wasted

    if sftype == 0:  # constant
        v = br.read_int(bps)
        samples = np.full(blocksize, v, dtype=np.int64)
    elif sftype == 1:  # verbatim
        samples = np.array([br.read_int(bps) for _ in range(blocksize)], dtype=np.int64)
    elif 8 <= sftype <= 12:  # fixed
        order = sftype - 8
        warm = [br.read_int(bps) for _ in range(order)]
        resid = _read_residual(br, blocksize, order)
        samples = np.empty(blocksize, dtype=np.int64)
        samples[:order] = warm
        coeffs = _FIXED_COEFFS[order]
        for i in range(order, blocksize):
            pred = 0
            for j, cf in enumerate(coeffs):
                pred += cf * samples[i - 1 - j]
            samples[i] = resid[i - order] + pred
    elif sftype & 0x20:  # LPC
        order = (sftype & 0x1F) + 1
        warm = [br.read_int(bps) for _ in range(order)]
        precision = br.read_uint(4) + 1
        if precision == 16:
            raise FlacError("invalid LPC precision escape")
        shift = br.read_int(5)
        if shift < 0:
            raise FlacError("negative LPC shift")
        coeffs = [br.read_int(precision) for _ in range(order)]
        resid = _read_residual(br, blocksize, order)
        samples = np.empty(blocksize, dtype=np.int64)
        samples[:order] = warm
        for i in range(order, blocksize):
            acc = 0
            for j in range(order):
                acc += coeffs[j] * samples[i - 1 - j]
            samples[i] = resid[i - order] + (acc >> shift)
    else:
        raise FlacError(f"reserved subframe type {sftype:#04x}")

    if wasted:
        samples = samples << wasted
    return samples


def read_flac(path) -> tuple[np.ndarray, int, int]:
    """Decode a FLAC file. Returns (samples[int32, (n, channels)], sample_rate, bits_per_sample)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"fLaC":
        raise FlacError("not a FLAC file (bad magic)")

    pos = 4
    streaminfo = None
    while True:
        if pos + 4 > len(data):
            raise FlacError("truncated metadata")
        header = data[pos]
        last = bool(header & 0x80)
        btype = header & 0x7F
        length = int.from_bytes(data[pos + 1:pos + 4], "big")
        body = data[pos + 4:pos + 4 + length]
        if btype == 0:
            if length < 34:
                raise FlacError("short STREAMINFO")
            br = _BitReader(body)
            br.read_uint(16); br.read_uint(16)  # min/max blocksize
            br.read_uint(24); br.read_uint(24)  # min/max framesize
            sample_rate = br.read_uint(20)
            channels = br.read_uint(3) + 1
            bps = br.read_uint(5) + 1
            total = br.read_uint(36)
            streaminfo = dict(sample_rate=sample_rate, channels=channels,
                              bps=bps, total_samples=total)
        pos += 4 + length
        if last:
            break
    if streaminfo is None:
        raise FlacError("missing STREAMINFO")

    sr = streaminfo["sample_rate"]
    nch = streaminfo["channels"]
    chunks = []
    br = _BitReader(data, pos)
    total_read = 0
    while br.byte_pos() < len(data) - 1:
        sync = br.read_uint(14)
        if sync != 0x3FFE:
            raise FlacError(f"lost frame sync at byte {br.byte_pos()}")
        br.read_uint(1)  # reserved
        br.read_uint(1)  # blocking strategy
        bs_code = br.read_uint(4)
        sr_code = br.read_uint(4)
        ch_code = br.read_uint(4)
        ss_code = br.read_uint(3)
        br.read_uint(1)  # reserved
        _read_utf8_number(br)
        if bs_code == 0:
            raise FlacError("reserved block size code 0")
        elif bs_code == 6:
            blocksize = br.read_uint(8) + 1
        elif bs_code == 7:
            blocksize = br.read_uint(16) + 1
        else:
            blocksize = _BLOCKSIZE_TABLE[bs_code]
        if sr_code == 12:
            br.read_uint(8)
        elif sr_code in (13, 14):
            br.read_uint(16)
        elif sr_code != 0 and sr_code in _SAMPLERATE_TABLE:
            pass
        elif sr_code == 15:
            raise FlacError("invalid sample rate code")
        bps = streaminfo["bps"] if ss_code == 0 else _SAMPLESIZE_TABLE.get(ss_code)
        if bps is None:
            raise FlacError(f"reserved sample size code {ss_code}")
        br.read_uint(8)  # header CRC-8 (not verified)

        if ch_code < 8:
            frame_nch = ch_code + 1
            subs = [_decode_subframe(br, blocksize, bps) for _ in range(frame_nch)]
            frame = np.stack(subs, axis=1)
        elif ch_code in (8, 9, 10):
            frame_nch = 2
            if ch_code == 8:  # left/side
                left = _decode_subframe(br, blocksize, bps)
                side = _decode_subframe(br, blocksize, bps + 1)
                right = left - side
                frame = np.stack([left, right], axis=1)
            elif ch_code == 9:  # right/side
                side = _decode_subframe(br, blocksize, bps + 1)
                right = _decode_subframe(br, blocksize, bps)
                left = right + side
                frame = np.stack([left, right], axis=1)
            else:  # mid/side
                mid = _decode_subframe(br, blocksize, bps)
                side = _decode_subframe(br, blocksize, bps + 1)
                mid2 = (mid << 1) | (side & 1)
                left = (mid2 + side) >> 1
                right = (mid2 - side) >> 1
                frame = np.stack([left, right], axis=1)
        else:
            raise FlacError(f"reserved channel assignment {ch_code}")
        if frame_nch != nch:
            raise FlacError("frame channel count differs from STREAMINFO")

        br.align_byte()
        br.read_uint(16)  # frame CRC-16 (not verified)
        chunks.append(frame)
        total_read += blocksize
        if streaminfo["total_samples"] and total_read >= streaminfo["total_samples"]:
            break

    if not chunks:
        raise FlacError("no audio frames")
    samples = np.concatenate(chunks, axis=0)
    if streaminfo["total_samples"]:
        samples = samples[:streaminfo["total_samples"]]
    return samples.astype(np.int32), sr, streaminfo["bps"]


def _best_rice_param(resid: np.ndarray) -> int:
    if len(resid) == 0:
        return 0
    mean_abs = max(float(np.mean(np.abs(resid))), 0.1)
    p = max(0, int(np.ceil(np.log2(mean_abs + 1))))
    return min(p, 14)


def _write_residual(bw: _BitWriter, resid: np.ndarray) -> None:
    bw.write_uint(0, 2)   # method 0: 4-bit Rice
    bw.write_uint(0, 4)   # partition order 0
    param = _best_rice_param(resid)
    bw.write_uint(param, 4)
    for r in resid:
        r = int(r)
        u = (abs(r) << 1) - 1 if r < 0 else (r << 1)  # zigzag
        bw.write_unary(u >> param)
        if param:
            bw.write_uint(u & ((1 << param) - 1), param)


def write_flac(path, samples: np.ndarray, sample_rate: int,
               subframe_mode: str = "verbatim", blocksize: int = 4096) -> None:
    """Encode 16-bit PCM to FLAC. samples: int16 array, shape (n,) or (n, channels)."""
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        raise FlacError("writer only supports int16 samples")
    if samples.ndim == 1:
        samples = samples[:, None]
    n, nch = samples.shape
    if nch > 8:
        raise FlacError("too many channels")
    if subframe_mode not in ("verbatim", "fixed2"):
        raise FlacError(f"unknown subframe mode {subframe_mode!r}")
    bps = 16

    md5 = hashlib.md5(samples.astype("<i2").tobytes()).digest()

    out = bytearray(b"fLaC")
    si = _BitWriter()
    si.write_uint(min(blocksize, n) if n else blocksize, 16)
    si.write_uint(blocksize, 16)
    si.write_uint(0, 24); si.write_uint(0, 24)
    si.write_uint(sample_rate, 20)
    si.write_uint(nch - 1, 3)
    si.write_uint(bps - 1, 5)
    si.write_uint(n, 36)
    body = si.getvalue() + md5
    out.append(0x80)  # last block, type 0
    out += len(body).to_bytes(3, "big")
    out += body

    frame_idx = 0
    for start in range(0, n, blocksize):
        block = samples[start:start + blocksize]
        bs = len(block)
        bw = _BitWriter()
        bw.write_uint(0x3FFE, 14)
        bw.write_uint(0, 1)
        bw.write_uint(0, 1)   # fixed blocksize stream
        bw.write_uint(7, 4)   # 16-bit blocksize-1 follows
        bw.write_uint(13, 4)  # 16-bit sample rate in Hz follows
        bw.write_uint(nch - 1, 4)
        bw.write_uint(4, 3)   # 16 bps
        bw.write_uint(0, 1)
        _write_utf8_number(bw, frame_idx)
        bw.write_uint(bs - 1, 16)
        bw.write_uint(sample_rate, 16)
        header = bw.buf[:]
        bw.write_uint(_crc8(bytes(header)), 8)

        for ch in range(nch):
            sig = block[:, ch].astype(np.int64)
            bw.write_uint(0, 1)
            if subframe_mode == "verbatim" or bs <= 2:
                bw.write_uint(1, 6)
                bw.write_uint(0, 1)
                for v in sig:
                    bw.write_int(int(v), bps)
            else:
                order = 2
                bw.write_uint(8 + order, 6)
                bw.write_uint(0, 1)
                for v in sig[:order]:
                    bw.write_int(int(v), bps)
                resid = sig[order:] - (2 * sig[order - 1:-1] - sig[:-order])
                _write_residual(bw, resid)
        bw.align_byte()
        frame_bytes = bytes(bw.buf)
        bw.write_uint(_crc16(frame_bytes), 16)
        out += bw.getvalue()
        frame_idx += 1

    with open(path, "wb") as fh:
        fh.write(bytes(out))
