#!/usr/bin/env python3
"""Deterministic stub pipeline component.

This file is copied verbatim into stub payloads as their executable, so it
must only depend on the standard library. It is also imported in-process by
the executor for virtual-time runs; both paths share :func:`execute`.

Invocation::

    run --input-dir DIR --output-dir DIR --meta METAFILE

``stub.cfg`` is read from the directory holding the metafile.
"""

import argparse
import hashlib
import os
import sys
import time
import zlib

CONFIG_NAME = "stub.cfg"


class StubError(Exception):
    pass


def parse_config(text):
    cfg = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise StubError("bad config line: %r" % line)
        cfg[key.strip()] = value.strip()
    return cfg


def canonical_schema_digest(headers):
    canon = sorted(h.strip().lower().encode("utf-8") for h in headers)
    return hashlib.sha256(b"\x1f".join(canon)).hexdigest()


def _headers(files):
    return [h for h in files["schema.txt"].decode("utf-8").split("\n") if h]


def _schema_bytes(headers):
    return ("".join(h + "\n" for h in headers)).encode("utf-8")


def _lineage(files):
    raw = files.get("lineage.txt", b"").decode("utf-8")
    return [t for t in raw.split("\n") if t]


def _unit(seed, text):
    digest = hashlib.sha256(("%s|%s" % (seed, text)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def score_of(cfg, lineage):
    seed = cfg.get("score_seed", "0")
    fn = cfg.get("score_fn", "hash")
    base = float(cfg.get("score_base", "0"))
    scale = float(cfg.get("score_scale", "1"))
    if fn == "hash":
        raw = _unit(seed, "\x1f".join(lineage))
    elif fn == "additive":
        # mean per-component quality plus a small pipeline-specific jitter
        quality = sum(_unit(seed, tok) for tok in lineage) / len(lineage)
        jitter = float(cfg.get("score_jitter", "0.05"))
        raw = quality + jitter * (_unit(seed, "\x1f".join(lineage)) - 0.5)
    else:
        raise StubError("unknown score_fn %r" % fn)
    return base + scale * raw


def _append_columns(data, columns, salt):
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    out = [lines[0] + b"".join(b"," + c.encode("utf-8") for c in columns)]
    for r, line in enumerate(lines[1:]):
        extra = b"".join(
            b",%d" % (zlib.crc32(("%s:%s:%d" % (salt, c, r)).encode("utf-8")) % 10000) for c in columns
        )
        out.append(line + extra)
    return b"\n".join(out) + b"\n"


def execute(cfg, inputs, payload):
    """Produce the output file map for one run.

    ``inputs`` is a list of file maps (one per upstream slot); ``payload``
    is this component's own file map.
    """
    role = cfg.get("role", "transform")
    token = cfg.get("token", "stub")
    if role == "dataset":
        data = payload["data.csv"]
        header = data.split(b"\n", 1)[0].decode("utf-8").split(",")
        return {
            "data.csv": data,
            "schema.txt": _schema_bytes(header),
            "lineage.txt": (token + "\n").encode("utf-8"),
        }
    if not inputs:
        raise StubError("%s needs an input" % token)
    expected = cfg.get("input_schema", "any")
    for files in inputs:
        if "schema.txt" not in files:
            raise StubError("input lacks schema.txt")
        got = canonical_schema_digest(_headers(files))
        if expected != "any" and got != expected:
            raise StubError("input schema mismatch: expected %s got %s" % (expected[:12], got[:12]))
    lineage = []
    for files in inputs:
        for tok in _lineage(files):
            if tok not in lineage:
                lineage.append(tok)
    lineage.append(token)
    primary = inputs[0]
    lineage_bytes = ("\n".join(lineage) + "\n").encode("utf-8")
    if role == "model":
        weights = payload.get("weights.bin", b"")
        data = primary.get("data.csv", b"")
        model = hashlib.sha256(weights + hashlib.sha256(data).digest() + lineage_bytes).digest()
        return {
            "data.model": model,
            "schema.txt": _schema_bytes(["prediction"]),
            "lineage.txt": lineage_bytes,
            "score.txt": ("%r\n" % score_of(cfg, lineage)).encode("utf-8"),
        }
    if role != "transform":
        raise StubError("unknown role %r" % role)
    transform = cfg.get("transform", "identity")
    headers = _headers(primary)
    data = primary["data.csv"]
    if transform == "append-column":
        cols = [c for c in cfg.get("new_columns", "").split(",") if c]
        data = _append_columns(data, cols, cfg.get("salt", token))
        headers = headers + cols
    elif transform != "identity":
        raise StubError("unknown transform %r" % transform)
    return {"data.csv": data, "schema.txt": _schema_bytes(headers), "lineage.txt": lineage_bytes}


def _read_dir(path):
    files = {}
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if os.path.isfile(full):
            with open(full, "rb") as fh:
                files[name] = fh.read()
    return files


def main(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--input-dir")
    parser.add_argument("--output-dir", required=True)
    parser.add_argument("--meta", required=True)
    args = parser.parse_args(argv)
    payload_dir = os.path.dirname(os.path.abspath(args.meta))
    payload = _read_dir(payload_dir)
    cfg = parse_config(payload[CONFIG_NAME].decode("utf-8"))
    inputs = []
    if args.input_dir:
        subdirs = sorted(d for d in os.listdir(args.input_dir) if os.path.isdir(os.path.join(args.input_dir, d)))
        if subdirs:
            inputs = [_read_dir(os.path.join(args.input_dir, d)) for d in subdirs]
        else:
            inputs = [_read_dir(args.input_dir)]
    time.sleep(float(cfg.get("cost_ms", "0")) / 1000.0)
    try:
        out = execute(cfg, inputs, payload)
    except StubError as exc:
        sys.stderr.write("stub failure: %s\n" % exc)
        return 3
    os.makedirs(args.output_dir, exist_ok=True)
    for name, data in out.items():
        with open(os.path.join(args.output_dir, name), "wb") as fh:
            fh.write(data)
    return 0


if __name__ == "__main__":
    sys.exit(main())
