"""Checkpoint, image and CSV I/O.

Checkpoint layout::

    FQSR\\n
    version=1\\n
    key=value\\n ...      model description, tensor manifest, quantizer states
    end\\n
    <payload>             little-endian float32 tensors in manifest order,
                          then one float32 interval per quantizer

Manifest lines read ``tensor=<name>:<d0>x<d1>...``. Optional training state
(config, iteration, Adam moments) rides along as ``train.*`` keys and extra
``adam.*`` manifest tensors, so a resumed run continues bit-for-bit.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError
from .netgraph import BitConfig, Weights, build_model, check_weights, tensor_manifest
from .quantizer import QuantParams
from .trainer import AdamState, TrainConfig

MAGIC = b"FQSR\n"
VERSION = 1
END = "end"


@dataclass
class Checkpoint:
    spec: object
    weights: Weights
    opt: AdamState = None
    cfg: TrainConfig = None


def _shape_str(shape):
    return "x".join(str(int(d)) for d in shape) if len(shape) else "scalar"


def _parse_shape(text):
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path, spec, weights, opt=None, cfg=None):
    check_weights(spec, weights)
    lines = [
        f"version={VERSION}",
        f"model={spec.name}",
        f"scale={spec.scale}",
        f"blocks={spec.blocks}",
        f"channels={spec.channels}",
        f"bitcfg={spec.bitcfg}",
    ]
    entries = [(name, weights.tensors[name]) for name, _ in tensor_manifest(spec)]
    if opt is not None:
        names = [name for name, _ in entries]
        entries += [(f"adam.m.{n}", opt.m[n]) for n in names]
        entries += [(f"adam.v.{n}", opt.v[n]) for n in names]
        entries += [("adam.m.intervals", opt.m_q), ("adam.v.intervals", opt.v_q)]
    lines += [f"tensor={name}:{_shape_str(np.shape(t))}" for name, t in entries]
    for qid, p in enumerate(weights.quant):
        lines.append(
            f"quant={qid}:{p.bits}:{int(p.signed)}:{int(p.frozen)}:{p.warmup_l}:{p.warmup_count}:{p.warmup_sum!r}"
        )
    if opt is not None:
        lines.append(f"train.step={opt.step}")
    if cfg is not None:
        lines += [f"train.cfg.{line}" for line in cfg.to_text().splitlines()]
    lines.append(END)
    header = MAGIC + ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(np.asarray(t, dtype="<f4").tobytes() for _, t in entries)
    payload += np.asarray([p.interval for p in weights.quant], dtype="<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ConfigError(f"{path}: not an FQSR checkpoint")
    pos = len(MAGIC)
    values, tensors, quants, cfg_values = {}, [], [], {}
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise ConfigError(f"{path}: truncated header")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == END:
            break
        key, _, value = line.partition("=")
        if key == "tensor":
            name, _, shape = value.rpartition(":")
            tensors.append((name, _parse_shape(shape)))
        elif key == "quant":
            quants.append(value.split(":"))
        elif key.startswith("train.cfg."):
            cfg_values[key[len("train.cfg."):]] = value
        else:
            values[key] = value
    if int(values.get("version", -1)) != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {values.get('version')}")

    try:
        spec = build_model(values["model"], int(values["scale"]), BitConfig.parse(values["bitcfg"]),
                           int(values["blocks"]), int(values["channels"]))
    except KeyError as exc:
        raise ConfigError(f"{path}: header lacks {exc.args[0]!r}") from None

    expected = sum(int(np.prod(s)) for _, s in tensors) * 4 + len(quants) * 4
    payload = blob[pos:]
    if len(payload) != expected:
        raise ConfigError(f"{path}: payload is {len(payload)} bytes, header describes {expected}")
    arrays = {}
    off = 0
    for name, shape in tensors:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
    intervals = np.frombuffer(payload, dtype="<f4", count=len(quants), offset=off).astype(np.float64)

    quant = []
    for (qid, bits, signed, frozen, wl, wc, ws), interval in zip(quants, intervals):
        p = QuantParams(int(bits), bool(int(signed)), float(interval), int(wl), float(ws), int(wc))
        p.frozen = bool(int(frozen))
        quant.append(p)
    names = [name for name, _ in tensor_manifest(spec)]
    weights = Weights({n: arrays[n] for n in names if n in arrays}, quant)
    check_weights(spec, weights)

    opt = None
    if "train.step" in values:
        opt = AdamState(
            int(values["train.step"]),
            {n: arrays[f"adam.m.{n}"] for n in names},
            {n: arrays[f"adam.v.{n}"] for n in names},
            arrays["adam.m.intervals"].copy(),
            arrays["adam.v.intervals"].copy(),
        )
    cfg = TrainConfig.from_mapping(cfg_values) if cfg_values else None
    return Checkpoint(spec, weights, opt, cfg)


def read_image(path):
    """Decode an image file into an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, img):
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {a.dtype}")
    Image.fromarray(a, "RGB").save(path)


def image_to_tensor(img):
    return (np.asarray(img, dtype=np.float64).transpose(2, 0, 1)[None] / 255.0).copy()


def tensor_to_image(t):
    a = np.asarray(t)[0].transpose(1, 2, 0)
    return np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)


IMAGE_EXTS = (".png", ".bmp", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff")


def list_images(directory):
    return sorted(
        os.path.join(directory, f) for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS)
    )


def write_csv(path_or_file, header, rows):
    """Comma-separated, header row, LF line endings."""
    if hasattr(path_or_file, "write"):
        w = csv.writer(path_or_file, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    with open(path_or_file, "w", newline="") as fh:
        write_csv(fh, header, rows)
