"""Command-line interface: count-params, train, eval, gradcheck, ablate.

Run configs are flat key=value text files; unknown keys are rejected and
missing keys take the documented defaults. Checkpoints store each distinct
tensor once (raw little-endian float64) plus the alias lists that encode
the sharing structure, so load(save(model)) is bit-identical.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O or
corruption.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys

import numpy as np

from .errors import (CheckpointError, ConfigError, DataError, DivergenceError,
                     SubformerError)
from . import params as P
from . import training as TR
from .model import ModelConfig, SCHEMES, build, randomize_params
from .tensor import Rng, Tensor, grad_check
from .training import ToyTask, TrainConfig, char_lm_dataset, train_loop, evaluate

MAGIC = b"SUBF1"

# key -> (type, default); insertion order is the canonical echo order
CONFIG_KEYS = {
    "task": (str, "copy"),
    "arch": (str, "seq2seq"),
    "vocab_size": (int, 32),
    "d_embed": (int, 16),
    "d_model": (int, 32),
    "d_sandwich": (int, 32),
    "ffn_model": (int, 64),
    "ffn_sandwich": (int, 64),
    "layers_enc": (int, 2),
    "layers_dec": (int, 2),
    "heads": (int, 2),
    "heads_safe": (int, 2),
    "scheme": (str, "none"),
    "embed_mode": (str, "safe"),
    "tie": (bool, True),
    "max_len": (int, 64),
    "dropout": (float, 0.0),
    "seed": (int, 0),
    "steps": (int, 500),
    "batch": (int, 16),
    "lr": (float, 0.05),
    "warmup": (int, 100),
    "label_smoothing": (float, 0.1),
    "data_path": (str, ""),
    "out_dir": (str, "out"),
}

TASKS = ("copy", "reverse", "sort", "lm")


def _parse_value(key, raw):
    typ, _ = CONFIG_KEYS[key]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}")


def parse_run_config(text):
    """Flat key=value text -> dict with defaults filled in."""
    cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        cfg[key] = _parse_value(key, raw)
    if cfg["task"] not in TASKS:
        raise ConfigError(f"unknown task {cfg['task']!r}; expected one of {TASKS}")
    if cfg["task"] == "lm":
        cfg["arch"] = "lm"
    elif cfg["arch"] == "lm":
        raise ConfigError(f"arch=lm requires task=lm, got task={cfg['task']!r}")
    return cfg


def run_config_text(cfg):
    """Canonical echo of a run config (fixed key order, byte-stable)."""
    lines = []
    for key in CONFIG_KEYS:
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def model_config_from_run(cfg):
    return ModelConfig(
        V=cfg["vocab_size"], d_e=cfg["d_embed"], d_m=cfg["d_model"],
        d_s=cfg["d_sandwich"], dff_m=cfg["ffn_model"], dff_s=cfg["ffn_sandwich"],
        L_enc=cfg["layers_enc"], L_dec=cfg["layers_dec"], n_heads=cfg["heads"],
        n_heads_safe=cfg["heads_safe"], scheme=cfg["scheme"],
        embed_mode=cfg["embed_mode"], tie_embeddings=cfg["tie"],
        max_len=cfg["max_len"], dropout=cfg["dropout"], arch=cfg["arch"],
    ).validate()


def train_config_from_run(cfg, **overrides):
    tc = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch"], base_lr=cfg["lr"],
                     warmup=cfg["warmup"], label_smoothing=cfg["label_smoothing"],
                     seed=cfg["seed"])
    for k, v in overrides.items():
        setattr(tc, k, v)
    return tc.validate()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS = {
    # tiny sandwich model that learns the copy task quickly
    "copy-tiny": dict(task="copy", vocab_size=32, d_embed=16, d_model=32,
                      d_sandwich=48, ffn_model=64, ffn_sandwich=64,
                      layers_enc=4, layers_dec=4, heads=2, heads_safe=2,
                      scheme="sandwich", embed_mode="safe", max_len=32,
                      steps=3000, batch=8, lr=0.06, warmup=100),
    # byte-level LM on the bundled text
    "charlm-tiny": dict(task="lm", d_embed=16, d_model=32, d_sandwich=32,
                        ffn_model=64, ffn_sandwich=64, layers_dec=3, layers_enc=0,
                        heads=2, heads_safe=2, scheme="sandwich", embed_mode="safe",
                        max_len=33, steps=2000, batch=8, lr=0.06, warmup=100,
                        label_smoothing=0.0),
    # tiny seq2seq for gradient checking
    "gradcheck-tiny": dict(task="copy", vocab_size=7, d_embed=4, d_model=8,
                           d_sandwich=12, ffn_model=8, ffn_sandwich=12,
                           layers_enc=3, layers_dec=3, heads=2, heads_safe=2,
                           scheme="sandwich", embed_mode="safe", max_len=16),
}

PRESET_TRAIN_OVERRIDES = {
    "copy-tiny": dict(target_acc=0.995, eval_interval=25),
    "charlm-tiny": dict(eval_interval=100),
}


def bundled_text_path():
    return os.path.join(os.path.dirname(__file__), "data", "tinytext.txt")


def _load_run_config(args):
    if getattr(args, "preset", None):
        if args.preset in ("table1", "table2"):
            raise ConfigError(f"preset {args.preset!r} is only valid for count-params")
        if args.preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {args.preset!r}; expected one of {sorted(PRESETS)}")
        cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
        cfg.update(PRESETS[args.preset])
        if cfg["task"] == "lm":
            cfg["arch"] = "lm"
    elif getattr(args, "config", None):
        try:
            with open(args.config) as f:
                text = f.read()
        except OSError as e:
            raise DataError(f"cannot read config file: {e}")
        cfg = parse_run_config(text)
    else:
        cfg = parse_run_config("")
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    if getattr(args, "data", None):
        cfg["data_path"] = args.data
    return cfg


def _load_task_data(cfg):
    if cfg["task"] == "lm":
        path = cfg["data_path"] or bundled_text_path()
        cfg["data_path"] = path
        if not os.path.exists(path):
            raise ConfigError(f"data_path does not exist: {path}")
        data = char_lm_dataset(path, context_len=cfg["max_len"] - 1)
        cfg["vocab_size"] = data.vocab
        return data
    return ToyTask(kind=cfg["task"], vocab=cfg["vocab_size"],
                   max_len=min(12, cfg["max_len"] - 2), seed=cfg["seed"])


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, run_cfg):
    text = run_config_text(run_cfg).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(text)), text]
    tensors = model.registry.distinct()
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    aliases = sorted(model.registry._aliases.items())
    parts.append(struct.pack("<I", len(aliases)))
    for alias, canon in aliases:
        for s in (alias, canon):
            sb = s.encode("utf-8")
            parts.append(struct.pack("<H", len(sb)))
            parts.append(sb)
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.ofs = 0

    def take(self, n):
        if self.ofs + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.ofs:self.ofs + n]
        self.ofs += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def string(self, n):
        return self.take(n).decode("utf-8")


def load_checkpoint(path):
    """Rebuild the model and overwrite its weights from the file."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}")
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"bad magic in {path}: not a checkpoint file")
    run_cfg = parse_run_config(r.string(r.u32()))
    model = build(model_config_from_run(run_cfg), Rng(run_cfg["seed"]))

    stored = {}
    for _ in range(r.u32()):
        name = r.string(r.u16())
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        stored[name] = data
    aliases = {}
    for _ in range(r.u32()):
        alias = r.string(r.u16())
        aliases[alias] = r.string(r.u16())

    reg = model.registry
    expected = {n for n, _ in reg.distinct()}
    if set(stored) != expected:
        raise CheckpointError("checkpoint tensors do not match the rebuilt model")
    if aliases != reg._aliases:
        raise CheckpointError("checkpoint sharing structure does not match the config")
    for name, data in stored.items():
        t = reg.resolve(name)
        if t.data.shape != data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        t.data = np.array(data, dtype=np.float64)
    return model, run_cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_count_params(args):
    if args.preset == "table1":
        print("Embedding factorization sweep (reported values alongside):")
        print(P.golden_table(P.embedding_table_rows()), end="")
        return 0
    if args.preset == "table2":
        print("Sharing-scheme sweep (reported values alongside):")
        print(P.golden_table(P.sharing_table_rows()), end="")
        return 0
    cfg = _load_run_config(args)
    mc = model_config_from_run(cfg)
    bd = P.count_params(mc)
    if args.csv:
        print(P.report_csv([("model", mc)]), end="")
    else:
        print(P.report_table([("model", mc)]), end="")
        print(f"total parameters: {bd.total}")
        for k, v in bd.as_dict().items():
            if k != "total":
                print(f"  {k:>22}: {v}")
    return 0


def cmd_train(args):
    cfg = _load_run_config(args)
    data = _load_task_data(cfg)
    if cfg["task"] == "lm" and not cfg["data_path"]:
        raise ConfigError("task=lm requires data_path")
    mc = model_config_from_run(cfg)
    model = build(mc, Rng(cfg["seed"]))

    overrides = dict(PRESET_TRAIN_OVERRIDES.get(getattr(args, "preset", None) or "", {}))
    if args.target_acc is not None:
        overrides["target_acc"] = args.target_acc
    if args.timing:
        overrides["timing"] = True
    tc = train_config_from_run(cfg, **overrides)

    result = train_loop(model, data, tc)

    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w") as f:
        f.write(result.csv(timing=tc.timing))
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(ckpt_path, model, cfg)

    f = result.final
    print(f"trained {result.stopped_at} steps; "
          f"eval_loss={f.eval_loss:.4f} token_acc={f.token_acc:.4f} ppl={f.ppl:.3f}")
    for thr, step in sorted(result.steps_to.items()):
        print(f"  token_acc >= {thr:.2f} first reached at step {step}")
    print(f"wrote {metrics_path} and {ckpt_path}")
    return 0


def cmd_eval(args):
    model, cfg = load_checkpoint(args.checkpoint)
    if args.data:
        cfg["data_path"] = args.data
    data = _load_task_data(cfg)
    tc = train_config_from_run(cfg)
    m = evaluate(model, TR._make_eval_data(data, tc))
    print(TR.METRICS_HEADER)
    print(m.csv_line())
    return 0


def cmd_gradcheck(args):
    cfg = _load_run_config(args)
    if not getattr(args, "preset", None) and not getattr(args, "config", None):
        cfg.update(PRESETS["gradcheck-tiny"])
    mc = model_config_from_run(cfg)
    model = build(mc, Rng(cfg["seed"]))
    randomize_params(model, Rng.for_stream(cfg["seed"], 13))
    if mc.arch == "lm":
        rng = Rng.for_stream(cfg["seed"], 7)
        batch = np.asarray(rng.integers(0, mc.V, (2, min(6, mc.max_len))))
    else:
        task = ToyTask(kind="copy", vocab=mc.V, max_len=3, seed=cfg["seed"])
        batch = TR.gen_task_batch(task, Rng.for_stream(cfg["seed"], 7), 2)

    def loss_fn():
        return TR._batch_loss(model, batch, label_smoothing=0.0)

    tensors = [t for _, t in model.registry.distinct()]
    err = grad_check(loss_fn, tensors, h=1e-4, zero_tol=1e-7)
    ok = err < 1e-4
    print(f"gradcheck: max relative error {err:.3e} over "
          f"{model.registry.total_scalars()} parameters -> {'OK' if ok else 'FAIL'}")
    return 0 if ok else 3


def cmd_ablate(args):
    cfg = _load_run_config(args)
    if not getattr(args, "config", None):
        # six layers so the scheme ordering (every2 == sandwich) is visible
        cfg["layers_enc"] = cfg["layers_dec"] = 6
    steps = args.steps if args.steps is not None else 300
    rows = []
    for scheme in SCHEMES:
        run = dict(cfg)
        run["scheme"] = scheme
        L = run["layers_enc"]
        if scheme == "every2" and L % 2 != 0:
            run["layers_enc"] = run["layers_dec"] = L + 1
        if scheme == "sandwich" and run["layers_enc"] < 3:
            run["layers_enc"] = run["layers_dec"] = max(3, L)
        if scheme != "sandwich":
            run["d_sandwich"] = run["d_model"]
        run["steps"] = steps
        mc = model_config_from_run(run)
        model = build(mc, Rng(run["seed"]))
        data = _load_task_data(run)
        tc = train_config_from_run(run, eval_interval=max(1, steps // 4))
        result = train_loop(model, data, tc)
        rows.append((scheme, P.count_params(mc).total, result.final.token_acc,
                     result.final.ms_per_step))
    print("scheme,params,token_acc,ms_per_step")
    for scheme, total, acc, ms in rows:
        print(f"{scheme},{total},{acc:.4f},{ms:.1f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser():
    p = argparse.ArgumentParser(prog="subformer",
                                description="parameter-efficient transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, preset=True):
        sp.add_argument("--config", help="path to a key=value run config")
        if preset:
            sp.add_argument("--preset", help="named built-in configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--data", help="dataset path (task=lm)")

    sp = sub.add_parser("count-params", help="closed-form parameter tables")
    common(sp)
    sp.add_argument("--csv", action="store_true", help="emit the CSV format")
    sp.set_defaults(fn=cmd_count_params)

    sp = sub.add_parser("train", help="train a model and write metrics + checkpoint")
    common(sp)
    sp.add_argument("--target-acc", type=float, default=None,
                    help="stop once eval token accuracy reaches this")
    sp.add_argument("--timing", action="store_true",
                    help="write measured ms/step into the metrics CSV "
                         "(breaks byte-identical reruns)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset path (task=lm)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train every sharing scheme on the copy task")
    common(sp, preset=False)
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (CheckpointError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except SubformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
