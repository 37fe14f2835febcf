"""Command-line entry point: ``lspreg <subcommand> ...``.

Every command that writes artifacts also writes a JSON run manifest holding
the fully resolved configuration, the seed, input fingerprints and output
hashes. ``lspreg replay <manifest>`` re-executes a recorded run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, evaluate_robust_accuracy
from .certify import MODES, certify_dataset
from .data import gen_gaussian_blobs, gen_two_moons, load_csv, save_csv
from .errors import ConfigError, FormatError, LSPError
from .model import Identity, load_model, save_model
from .report import ROBUSTNESS, append_robustness_row, build_report
from .structure import LSP_KINDS, STRUCTURES, save_bank
from .train import (TrainConfig, init_encoder, new_classifier, train_adversarial, train_pretext,
                    train_standard)

log = logging.getLogger("lspreg")

TRAIN_COMMANDS = ("train", "train-adv", "pretext")
ATTACKS = ("fgsm", "pgd", "cw")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _outputs(base: Path, files: dict) -> dict:
    return {k: {"path": str(Path(p).relative_to(base)) if Path(p).is_relative_to(base) else str(p),
                "sha256": sha256_file(p)} for k, p in files.items()}


def write_manifest(path, command: str, config: dict, seed: int, inputs: dict, outputs: dict,
                   started: str, name: str | None = None) -> dict:
    path = Path(path)
    manifest = {
        "tool": "lspreg",
        "version": __version__,
        "command": command,
        "name": name,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": _outputs(path.parent, outputs),
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _dataset_input(path) -> tuple[dict, object]:
    ds = load_csv(path)
    return {"path": str(Path(path).resolve()), "fingerprint": ds.fingerprint()}, ds


def _file_input(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    return {"path": str(p.resolve()), "sha256": sha256_file(p)}


def read_config_file(path) -> dict:
    """Load a JSON config; a run manifest is accepted and its ``config`` is used."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    if d.get("tool") == "lspreg" and "config" in d:
        d = d["config"]
    return d


# -- argument parsing ---------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _schedule(text: str) -> dict:
    """``"75:10,90:10"`` -> {75: 10.0, 90: 10.0}; empty string disables drops."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            k, v = part.split(":")
            out[int(k)] = float(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad schedule entry {part!r}; use EPOCH:DIVISOR") from None
    return out


def _centers(text: str) -> list[list[float]]:
    try:
        return [[float(v) for v in c.split(",")] for c in text.split(";") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad centers {text!r}; use 'x,y;x,y'") from None


S = argparse.SUPPRESS

# flag dest -> TrainConfig field
TRAIN_FIELDS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate",
    "lr_schedule": "lr_schedule", "momentum": "momentum", "lam": "lam", "m": "m",
    "lsp_kind": "lsp_kind", "structure": "structure", "early_stopping": "early_stopping",
    "hidden": "hidden", "val_fraction": "val_fraction", "bank_momentum": "bank_momentum",
    "mixup_alpha": "mixup_alpha", "pretext_tau": "pretext_tau", "pretext_dim": "pretext_dim",
    "pretext_hidden": "pretext_hidden",
}
ATTACK_FIELDS = ("norm", "epsilon", "steps", "step_size", "random_init")


def _add_shared(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", default=S, help="JSON config (or run manifest) overriding defaults")
    p.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    p.add_argument("--out", required=True, help=out_help)


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack")
    g.add_argument("--norm", choices=("linf", "l2"), default=S)
    g.add_argument("--epsilon", type=float, default=S)
    g.add_argument("--steps", type=int, default=S)
    g.add_argument("--step-size", type=float, default=S)
    g.add_argument("--random-init", action=argparse.BooleanOptionalAction, default=S)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--name", default=S, help="method label used by `report`")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=S)
    g.add_argument("--batch-size", type=int, default=S)
    g.add_argument("--lr", type=float, default=S)
    g.add_argument("--lr-schedule", type=_schedule, default=S, help="e.g. 75:10,90:10")
    g.add_argument("--momentum", type=float, default=S)
    g.add_argument("--lambda", dest="lam", type=float, default=S)
    g.add_argument("--m", type=int, default=S, help="neighbors per anchor")
    g.add_argument("--lsp-kind", choices=LSP_KINDS, default=S)
    g.add_argument("--structure", choices=STRUCTURES, default=S)
    g.add_argument("--early-stopping", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--hidden", type=_int_list, default=S, help="hidden widths, e.g. 32,32")
    g.add_argument("--val-fraction", type=float, default=S)
    g.add_argument("--bank-momentum", type=float, default=S)
    g.add_argument("--mixup-alpha", type=float, default=S)
    g.add_argument("--pretext-tau", type=float, default=S)
    g.add_argument("--pretext-dim", type=int, default=S)
    g.add_argument("--pretext-hidden", type=_int_list, default=S)
    _add_attack_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lspreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lspreg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    _add_shared(p, "output CSV path")
    p.add_argument("--kind", choices=("moons", "blobs"), default=S)
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--noise", type=float, default=S, help="two-moons noise sigma")
    p.add_argument("--centers", type=_centers, default=S, help="blob centers 'x,y;x,y'")
    p.add_argument("--sigma", type=float, default=S, help="blob spread")

    p = sub.add_parser("pretext", help="train an instance-discrimination encoder")
    _add_shared(p, "run directory")
    _add_train_flags(p)

    p = sub.add_parser("train", help="standard training with the LSP term")
    _add_shared(p, "run directory")
    _add_train_flags(p)
    p.add_argument("--encoder", default=S, help="encoder checkpoint used as input metric")

    p = sub.add_parser("train-adv", help="PGD adversarial training with the bank LSP term")
    _add_shared(p, "run directory")
    _add_train_flags(p)

    p = sub.add_parser("attack", help="evaluate robust accuracy; appends one CSV row")
    _add_shared(p, f"CSV to append to (a directory means DIR/{ROBUSTNESS})")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attack", choices=ATTACKS, default=S)
    p.add_argument("--name", default=S)
    _add_attack_flags(p)

    p = sub.add_parser("certify", help="Lipschitz-margin certified radii, one CSV row per sample")
    _add_shared(p, "certificate CSV path")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES, default=S)
    p.add_argument("--radius-probes", type=int, default=S, help="probes for the Lipschitz estimate")
    p.add_argument("--falsify-probes", type=int, default=S)
    p.add_argument("--lipschitz-radius", type=float, default=S)
    p.add_argument("--limit", type=int, default=S, help="certify only the first N samples")

    p = sub.add_parser("report", help="comparison table, curve CSVs and figures")
    _add_shared(p, "report directory")
    p.add_argument("runs", nargs="+", help="run directories")

    p = sub.add_parser("replay", help="re-run a recorded manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output location for the replayed run")
    return parser


# -- config resolution --------------------------------------------------------

def resolve_train_config(args: argparse.Namespace, command: str) -> TrainConfig:
    """defaults < JSON file < flags; conflicts raise before anything runs."""
    d = TrainConfig().to_dict()
    file_cfg = read_config_file(args.config) if "config" in args else {}
    unknown = set(file_cfg) - set(d)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if command == "train" and file_cfg.get("adversarial"):
        raise ConfigError("config sets adversarial=true; use `train-adv` instead of `train`")
    if command == "train-adv" and file_cfg.get("adversarial") is False:
        raise ConfigError("config sets adversarial=false; use `train` instead of `train-adv`")
    attack = dict(d["attack"])
    attack.update(file_cfg.pop("attack", {}) or {})
    d.update(file_cfg)
    flags = vars(args)
    for dest, key in TRAIN_FIELDS.items():
        if dest in flags:
            d[key] = flags[dest]
    for key in ATTACK_FIELDS:
        if key in flags:
            attack[key] = flags[key]
    if "seed" in flags:
        d["seed"] = flags["seed"]
    d["attack"] = attack
    d["adversarial"] = command == "train-adv"
    if command == "train-adv":
        if d["mixup_alpha"] > 0:
            raise ConfigError("mixup is only supported by `train`")
        if "encoder" in flags:
            raise ConfigError("`train-adv` mines neighbors from memory banks; --encoder not allowed")
    if command == "train" and d["structure"] == "off" and "lam" in flags and d["lam"] > 0:
        raise ConfigError("--structure off disables the LSP term; drop --lambda or set it to 0")
    return TrainConfig.from_dict(d)


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    d = dict(defaults)
    if "config" in args:
        file_cfg = read_config_file(args.config)
        unknown = set(file_cfg) - set(d)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.update(file_cfg)
    for key in d:
        if key in vars(args):
            d[key] = vars(args)[key]
    return d


GEN_DEFAULTS = {"kind": "moons", "n": 500, "noise": 0.1, "centers": [[0.25, 0.25], [0.75, 0.75]],
                "sigma": 0.05, "seed": 0}
ATTACK_DEFAULTS = {"attack": "pgd", **{k: v for k, v in AttackConfig().to_dict().items()
                                       if k in ("norm", "epsilon", "steps", "step_size",
                                                "random_init", "seed")}, "name": None}
CERTIFY_DEFAULTS = {"mode": "analytic", "radius_probes": 100, "falsify_probes": None,
                    "lipschitz_radius": 0.1, "limit": None, "seed": 0}


# -- commands -----------------------------------------------------------------

def cmd_gen(args) -> dict:
    cfg = _resolve(args, GEN_DEFAULTS)
    return run_gen(cfg, args.out)


def run_gen(cfg: dict, out) -> dict:
    started = _now()
    if cfg["kind"] == "moons":
        ds = gen_two_moons(cfg["n"], cfg["noise"], cfg["seed"])
    elif cfg["kind"] == "blobs":
        ds = gen_gaussian_blobs(cfg["n"], cfg["centers"], cfg["sigma"], cfg["seed"])
    else:
        raise ConfigError(f"unknown dataset kind {cfg['kind']!r}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out)
    return write_manifest(out.with_name(out.name + ".manifest.json"), "gen", cfg, cfg["seed"], {},
                          {"data": out}, started)


def _progress(row: dict) -> None:
    log.info("epoch %d ce=%.4f lsp=%.4g clean=%.3f robust=%.3f purity=%.3f",
             row["epoch"], row["ce"], row["lsp"], row["clean_acc"], row["robust_acc"], row["purity"])


def cmd_train_like(args) -> dict:
    cfg = resolve_train_config(args, args.command)
    inputs = {}
    data_in, ds = _dataset_input(args.data)
    inputs["data"] = data_in
    encoder_path = getattr(args, "encoder", None)
    if encoder_path is not None:
        inputs["encoder"] = _file_input(encoder_path)
    return run_training(args.command, cfg, ds, inputs, args.out, getattr(args, "name", None))


def run_training(command: str, cfg: TrainConfig, ds, inputs: dict, out, name=None) -> dict:
    started = _now()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    on_epoch = _progress if log.isEnabledFor(logging.INFO) else None
    if command == "pretext":
        res = train_pretext(init_encoder(ds.dim, cfg), ds, cfg)
        save_model(res.encoder, out / "encoder.bin")
        save_bank(res.bank, out / "pretext_bank.bin")
        with open(out / "pretext_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            w.writerows([i + 1, repr(float(v))] for i, v in enumerate(res.losses))
        files = {"encoder": out / "encoder.bin", "bank": out / "pretext_bank.bin",
                 "log": out / "pretext_log.csv"}
    elif command == "train":
        g = load_model(inputs["encoder"]["path"]) if "encoder" in inputs else Identity()
        model, tlog = train_standard(new_classifier(ds, cfg), g, ds, cfg, on_epoch=on_epoch)
        save_model(model, out / "model.bin")
        tlog.to_csv(out / "trainlog.csv")
        files = {"model": out / "model.bin", "trainlog": out / "trainlog.csv"}
    elif command == "train-adv":
        model, tlog, state = train_adversarial(new_classifier(ds, cfg), ds, cfg, on_epoch=on_epoch,
                                               return_state=True)
        save_model(model, out / "model.bin")
        save_bank(state.nat_bank, out / "nat_bank.bin")
        save_bank(state.adv_bank, out / "adv_bank.bin")
        tlog.to_csv(out / "trainlog.csv")
        files = {"model": out / "model.bin", "trainlog": out / "trainlog.csv",
                 "nat_bank": out / "nat_bank.bin", "adv_bank": out / "adv_bank.bin"}
    else:
        raise ConfigError(f"not a training command: {command}")
    return write_manifest(out / "manifest.json", command, cfg.to_dict(), cfg.seed, inputs, files,
                          started, name or out.name)


def _model_manifest(model_path: Path) -> str:
    m = model_path.resolve().parent / "manifest.json"
    return str(m) if m.is_file() else ""


def cmd_attack(args) -> dict:
    cfg = _resolve(args, ATTACK_DEFAULTS)
    if cfg["attack"] not in ATTACKS:
        raise ConfigError(f"attack must be one of {ATTACKS}")
    model_path = Path(args.model)
    model = load_model(model_path)
    ds = load_csv(args.data)
    acfg = AttackConfig(norm=cfg["norm"], epsilon=cfg["epsilon"], steps=cfg["steps"],
                        step_size=cfg["step_size"], random_init=cfg["random_init"],
                        seed=cfg["seed"])
    if cfg["attack"] == "fgsm" and acfg.norm != "linf":
        raise ConfigError("fgsm is defined for the linf norm only")
    if ds.dim != model.layer_dims[0] or ds.n_classes > model.n_classes:
        raise ConfigError(f"dataset (dim {ds.dim}, {ds.n_classes} classes) does not fit model "
                          f"{model.layer_dims}")
    clean, robust = evaluate_robust_accuracy(model, ds, acfg, cfg["attack"])
    manifest = _model_manifest(model_path)
    name = cfg["name"]
    if name is None and manifest:
        name = json.loads(Path(manifest).read_text()).get("name")
    row = {"name": name or model_path.parent.name, "model": str(model_path.resolve()),
           "model_sha256": sha256_file(model_path), "manifest": manifest,
           "dataset": str(Path(args.data).resolve()), "dataset_fingerprint": ds.fingerprint(),
           "attack": cfg["attack"], "norm": acfg.norm, "epsilon": repr(acfg.epsilon),
           "steps": acfg.steps, "step_size": repr(acfg.step_size),
           "random_init": acfg.random_init, "seed": acfg.seed, "n": len(ds),
           "clean_acc": repr(clean), "robust_acc": repr(robust)}
    out = Path(args.out)
    if out.is_dir():
        out = out / ROBUSTNESS
    out.parent.mkdir(parents=True, exist_ok=True)
    append_robustness_row(out, row)
    print(f"{row['name']}: {cfg['attack']} clean={clean:.4f} robust={robust:.4f}")
    return row


def cmd_certify(args) -> dict:
    cfg = _resolve(args, CERTIFY_DEFAULTS)
    started = _now()
    if cfg["radius_probes"] < 1:
        raise ConfigError("--radius-probes must be >= 1")
    if cfg["falsify_probes"] is not None and cfg["falsify_probes"] < 0:
        raise ConfigError("--falsify-probes must be >= 0")
    model = load_model(args.model)
    data_in, ds = _dataset_input(args.data)
    if ds.dim != model.layer_dims[0]:
        raise ConfigError(f"dataset dim {ds.dim} does not match model input {model.layer_dims[0]}")
    x = ds.features if cfg["limit"] is None else ds.features[: cfg["limit"]]
    reports = certify_dataset(model, x, cfg["mode"], cfg["radius_probes"], cfg["lipschitz_radius"],
                              cfg["falsify_probes"], cfg["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.to_row() for r in reports]
    fields = list(rows[0]) if rows else ["sample_id"]
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    radii = np.array([r.certified_radius for r in reports]) if reports else np.zeros(0)
    summary = {"n": len(reports), "mean_radius": float(radii.mean()) if len(radii) else None,
               "median_radius": float(np.median(radii)) if len(radii) else None,
               "falsified": int(sum(r.falsified for r in reports)),
               "sound": cfg["mode"] == "analytic"}
    label = "sound" if summary["sound"] else "heuristic (empirical lower-bound L)"
    print(f"certified {summary['n']} samples, L2 radius mean={summary['mean_radius']} "
          f"median={summary['median_radius']} [{label}], falsified={summary['falsified']}")
    inputs = {"data": data_in, "model": _file_input(args.model)}
    m = write_manifest(out.with_name(out.name + ".manifest.json"), "certify", cfg, cfg["seed"],
                       inputs, {"certificates": out}, started)
    m["summary"] = summary
    return m


def cmd_report(args) -> dict:
    started = _now()
    written = build_report(args.runs, args.out)
    out = Path(args.out)
    inputs = {f"run{i}": str(Path(r).resolve()) for i, r in enumerate(args.runs)}
    print((out / "report.md").read_text(), end="")
    return write_manifest(out / "manifest.json", "report", {}, 0, inputs, written, started)


def cmd_replay(args) -> dict:
    """Re-run the command recorded in a manifest and compare every output hash."""
    src = Path(args.manifest)
    if not src.is_file():
        raise ConfigError(f"manifest not found: {src}")
    try:
        manifest = json.loads(src.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {src} is not valid JSON: {exc}") from None
    command = manifest.get("command")
    if manifest.get("tool") != "lspreg" or command not in ("gen", *TRAIN_COMMANDS):
        raise FormatError(f"manifest {src} does not describe a replayable run")
    if command == "gen":
        new = run_gen(manifest["config"], args.out)
    else:
        inputs = manifest["inputs"]
        ds = load_csv(inputs["data"]["path"])
        if ds.fingerprint() != inputs["data"]["fingerprint"]:
            raise FormatError(f"dataset {inputs['data']['path']} changed since the recorded run")
        if "encoder" in inputs and sha256_file(inputs["encoder"]["path"]) != inputs["encoder"]["sha256"]:
            raise FormatError(f"encoder {inputs['encoder']['path']} changed since the recorded run")
        cfg = TrainConfig.from_dict(manifest["config"])
        new = run_training(command, cfg, ds, inputs, args.out, manifest.get("name"))
    mismatched = [k for k, v in manifest["outputs"].items()
                  if new["outputs"].get(k, {}).get("sha256") != v["sha256"]]
    for k, v in new["outputs"].items():
        status = "MISMATCH" if k in mismatched else "identical"
        print(f"{k}: {v['sha256']} {status}")
    new["replay_mismatches"] = mismatched
    return new


COMMANDS = {"gen": cmd_gen, "pretext": cmd_train_like, "train": cmd_train_like,
            "train-adv": cmd_train_like, "attack": cmd_attack, "certify": cmd_certify,
            "report": cmd_report, "replay": cmd_replay}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        # overflow surfaces as NumericError from the finiteness checks
        with np.errstate(over="ignore", invalid="ignore"):
            result = COMMANDS[args.command](args)
    except LSPError as exc:
        print(f"lspreg {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command == "replay" and result["replay_mismatches"]:
        print("replay diverged from the recorded run", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
