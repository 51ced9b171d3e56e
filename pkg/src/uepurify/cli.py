"""Command-line entry point: ``uepurify <command> [--config FILE] [--out DIR] ...``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 data error,
4 training divergence.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import theory
from .attacks import ATTACKS, AttackSpec, EMAttackConfig, apply_poison, generate_attack
from .data import ContainerError, LabeledImageSet, SynthConfig, generate_synthetic_dataset, read_container, split_dataset, write_container
from .dvae import DVAEConfig, infer_dvae, load_checkpoint, save_checkpoint, train_dvae
from .errors import ConfigError, DivergenceError
from .evaluation import ClassifierConfig, disentanglement_validation, evaluate, kld_sweep, train_classifier
from .pipeline import VARIANTS, PurifyConfig, ablation_variant, amplify_ues, detect_unlearnable, two_stage_purify

log = logging.getLogger("uepurify")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------- configuration

SECTIONS = {"data": SynthConfig, "em": EMAttackConfig, "dvae": DVAEConfig, "classifier": ClassifierConfig}


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            return {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from e
    return raw


def _build(cls, section, prefix):
    obj = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in fields or not fields[key].init or dataclasses.is_dataclass(getattr(obj, key)):
            raise ConfigError(f"unknown key [{prefix}] {key}")
        kwargs[key] = _coerce(raw, getattr(obj, key), f"[{prefix}] {key}")
    return dataclasses.replace(obj, **kwargs)


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    data: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    attack: AttackSpec = dataclasses.field(default_factory=AttackSpec)
    dvae: DVAEConfig = dataclasses.field(default_factory=DVAEConfig)
    purify: PurifyConfig = dataclasses.field(default_factory=PurifyConfig)
    classifier: ClassifierConfig = dataclasses.field(default_factory=ClassifierConfig)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        """Sections: [run] [data] [attack] [em] [dvae] [purify] [classifier]; every key is optional."""
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file {path} not found")
            try:
                parser.read(path)
            except configparser.Error as e:
                raise ConfigError(f"{path}: {e}") from e
        known = {"run", "data", "attack", "em", "dvae", "purify", "classifier"}
        extra = set(parser.sections()) - known
        if extra:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(extra))}")
        cfg = cls()
        sec = lambda name: dict(parser[name]) if parser.has_section(name) else {}
        run = sec("run")
        for key, raw in run.items():
            if key not in ("seed", "out"):
                raise ConfigError(f"unknown key [run] {key}")
        cfg.seed = _coerce(run.get("seed", "0"), 0, "[run] seed")
        cfg.out = run.get("out", cfg.out)
        try:
            cfg.data = _build(SynthConfig, sec("data"), "data").validate()
            em = _build(EMAttackConfig, sec("em"), "em").validate()
            cfg.attack = dataclasses.replace(_build(AttackSpec, sec("attack"), "attack"), em=em)
            cfg.dvae = _build(DVAEConfig, sec("dvae"), "dvae").validate()
            cfg.classifier = _build(ClassifierConfig, sec("classifier"), "classifier").validate()
            purify = _build(PurifyConfig, {k: v for k, v in sec("purify").items() if not k.startswith("stage")}, "purify")
            stage_keys = {k: v for k, v in sec("purify").items() if k.startswith("stage")}
            overrides = {1: {}, 2: {}}
            for key, raw in stage_keys.items():  # e.g. stage1_epochs = 20
                stage, _, name = key.partition("_")
                if stage not in ("stage1", "stage2") or name not in {f.name for f in dataclasses.fields(DVAEConfig)}:
                    raise ConfigError(f"unknown key [purify] {key}")
                overrides[int(stage[-1])][name] = _coerce(raw, getattr(DVAEConfig(), name), f"[purify] {key}")
            base = {f.name: getattr(cfg.dvae, f.name) for f in dataclasses.fields(DVAEConfig)
                    if getattr(cfg.dvae, f.name) != getattr(DVAEConfig(), f.name)}
            cfg.purify = dataclasses.replace(purify, stage1={**base, **overrides[1]},
                                             stage2={**base, **overrides[2]}).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if cfg.attack.kind not in ATTACKS:
            raise ConfigError(f"unknown attack {cfg.attack.kind!r}")
        return cfg


# --------------------------------------------------------------------------- helpers


def _threads():
    raw = os.environ.get("UEPURIFY_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"UEPURIFY_THREADS must be an integer, got {raw!r}") from e
    if n < 0:
        raise ConfigError("UEPURIFY_THREADS must be >= 0")
    if n > 0:
        torch.set_num_threads(n)


def _read(path) -> LabeledImageSet:
    try:
        ds, _ = read_container(path)
    except FileNotFoundError as e:
        raise DataError(f"input {path} not found") from e
    except ContainerError as e:
        raise DataError(str(e)) from e
    return ds


def _write_json(path: Path, obj) -> None:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        raise TypeError(type(o).__name__)

    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n")


def _datasets(args, cfg: RunConfig):
    """Clean (train, test): from ``--data DIR`` if given, else generated from [data]."""
    if getattr(args, "data", None):
        return _read(Path(args.data) / "train.uepd"), _read(Path(args.data) / "test.uepd")
    return generate_synthetic_dataset(dataclasses.replace(cfg.data, seed=cfg.seed))


def _poisoned(args, cfg: RunConfig, ratio=None):
    """Returns ``(clean_train, test, P0, mask)``; P0 comes from ``--input`` when given."""
    train, test = _datasets(args, cfg)
    if getattr(args, "input", None):
        P0 = _read(args.input)
        if P0.images.shape != train.images.shape:
            raise DataError("--input does not match the clean training set")
        return train, test, P0, None
    spec = dataclasses.replace(cfg.attack, kind=args.attack or cfg.attack.kind)
    perturb = generate_attack(train, spec, cfg.seed)
    ratio = args.ratio if ratio is None else ratio
    P0, mask = apply_poison(train, perturb, ratio, cfg.seed)
    return train, test, P0, mask


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, out):
    train, test = generate_synthetic_dataset(dataclasses.replace(cfg.data, seed=cfg.seed))
    write_container(train, out / "train.uepd")
    write_container(test, out / "test.uepd")
    _write_json(out / "gen-data.json", {"train": len(train), "test": len(test), "config": cfg.data})
    return EXIT_OK


def cmd_gen_ue(args, cfg, out):
    train, _ = _datasets(args, cfg)
    spec = dataclasses.replace(cfg.attack, kind=args.attack or cfg.attack.kind)
    perturb = generate_attack(train, spec, cfg.seed)
    P0, mask = apply_poison(train, perturb, args.ratio, cfg.seed)
    perturb.deltas[~mask.flags] = 0
    write_container(P0, out / "poisoned.uepd", perturb)
    np.save(out / "mask.npy", mask.flags)
    _write_json(out / "gen-ue.json", {"attack": spec.kind, "ratio": args.ratio, "poisoned": int(mask.flags.sum()),
                                      "meta": perturb.meta})
    return EXIT_OK


def cmd_train_dvae(args, cfg, out):
    ds = _read(args.input)
    model, tlog = train_dvae(ds, dataclasses.replace(cfg.dvae, seed=cfg.seed))
    save_checkpoint(model, cfg.dvae, out / "dvae.pt")
    recon, p_hat = infer_dvae(model, ds)
    write_container(recon, out / "recon.uepd")
    _write_json(out / "train-dvae.json", {"epochs": tlog.epochs, "final_psnr": tlog.final_psnr})
    return EXIT_OK


def cmd_purify(args, cfg, out):
    _, _, P0, _ = _poisoned(args, cfg)
    P3, report = two_stage_purify(P0, cfg.purify, cfg.seed)
    for name in ("P1", "P2", "P3"):
        write_container(report.sets[name], out / f"{name}.uepd")
    write_container(P0, out / "P0.uepd")
    _write_json(out / "purify-report.json", report.summary())
    return EXIT_OK


def cmd_ablate(args, cfg, out):
    _, _, P0, _ = _poisoned(args, cfg)
    result = ablation_variant(P0, args.variant, cfg.purify, cfg.seed)
    write_container(result, out / f"{args.variant}.uepd")
    return EXIT_OK


def cmd_train_clf(args, cfg, out):
    ds = _read(args.input)
    model = train_classifier(ds, dataclasses.replace(cfg.classifier, seed=cfg.seed))
    torch.save({"config": dataclasses.asdict(cfg.classifier), "classes": ds.class_count, "in_ch": ds.shape[0],
                "state": model.state_dict()}, out / "classifier.pt")
    report = {"train_accuracy": evaluate(model, ds)}
    if args.test:
        report["test_accuracy"] = evaluate(model, _read(args.test))
    _write_json(out / "train-clf.json", report)
    return EXIT_OK


def cmd_eval(args, cfg, out):
    from .evaluation import build_classifier

    try:
        blob = torch.load(args.model, map_location="cpu", weights_only=False)
    except FileNotFoundError as e:
        raise DataError(f"model {args.model} not found") from e
    model = build_classifier(ClassifierConfig(**blob["config"]), blob["classes"], blob["in_ch"])
    model.load_state_dict(blob["state"])
    ds = _read(args.input)
    if ds.shape[0] != blob["in_ch"] or ds.labels.max() >= blob["classes"]:
        raise DataError("dataset does not match the classifier")
    _write_json(out / "eval.json", {"input": str(args.input), "accuracy": evaluate(model, ds)})
    return EXIT_OK


def cmd_validate_disentangle(args, cfg, out):
    train, test, P0, _ = _poisoned(args, cfg, ratio=1.0)
    model, _ = train_dvae(P0, cfg.purify.dvae_config(1, cfg.seed))
    _, p_hat = infer_dvae(model, P0)
    report = disentanglement_validation(train, p_hat, P0, test, dataclasses.replace(cfg.classifier, seed=cfg.seed))
    _write_json(out / "disentangle.json", report)
    return EXIT_OK


def cmd_detect(args, cfg, out):
    _, _, P0, mask = _poisoned(args, cfg)
    if mask is None:
        raise ConfigError("detect needs --attack (the true mask is only known for generated UEs)")
    report = detect_unlearnable(P0, mask, cfg.purify, cfg.seed, cfg.classifier)
    np.save(out / "flags.npy", report.flags)
    _write_json(out / "detect.json", report.summary())
    return EXIT_OK


def cmd_amplify(args, cfg, out):
    train, test = _datasets(args, cfg)
    small, rest = split_dataset(train, args.fraction, cfg.seed)
    spec = dataclasses.replace(cfg.attack, kind=args.attack or cfg.attack.kind)
    P_small, _ = apply_poison(small, generate_attack(small, spec, cfg.seed))
    amplified = amplify_ues(P_small, rest, cfg.purify, cfg.seed)
    write_container(amplified, out / "amplified.uepd")
    acc = evaluate(train_classifier(amplified, dataclasses.replace(cfg.classifier, seed=cfg.seed)), test)
    _write_json(out / "amplify.json", {"fraction": args.fraction, "n": len(amplified), "victim_test_accuracy": acc})
    return EXIT_OK


def cmd_kld_sweep(args, cfg, out):
    _, test, P0, _ = _poisoned(args, cfg)
    targets = [float(t) for t in args.targets.split(",")]
    points = kld_sweep(P0, targets, test, dataclasses.replace(cfg.dvae, seed=cfg.seed),
                       dataclasses.replace(cfg.classifier, seed=cfg.seed))
    _write_json(out / "kld-sweep.json", {"points": points})
    return EXIT_OK


def verify_theory() -> dict:
    """Bound, monotonicity and closed-form checks; every entry must be True."""
    grid = [0.05, 0.1, 0.25, 0.5, 1, 2, 4, 8, 16]
    klds = [theory.mixture_kld_to_standard_normal(r) for r in grid]
    inside = all(lo - 1e-6 <= k <= hi + 1e-6 for k, (lo, hi) in zip(klds, map(theory.kld_bounds, grid)))
    spec = theory.BinaryGaussianSpec([1.0], [-1.0], [[1.0]])
    err = theory.monte_carlo_bayes_error(spec, 200_000, 0)
    return {"kld_within_bounds": inside, "kld_zero_at_r0": theory.mixture_kld_to_standard_normal(0.0) <= 1e-9,
            "kld_increasing": all(a < b for a, b in zip(klds, klds[1:])),
            "bayes_error_near_phi_minus_1": abs(err - 0.158655) < 0.005,
            "klds": dict(zip(map(str, grid), klds))}


def cmd_theory_verify(args, cfg, out):
    checks = verify_theory()
    _write_json(out / "theory-verify.json", checks)
    ok = all(v for v in checks.values() if isinstance(v, bool))
    print("theory checks " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {
    "gen-data": cmd_gen_data, "gen-ue": cmd_gen_ue, "train-dvae": cmd_train_dvae, "purify": cmd_purify,
    "ablate": cmd_ablate, "train-clf": cmd_train_clf, "eval": cmd_eval,
    "validate-disentangle": cmd_validate_disentangle, "detect": cmd_detect, "amplify": cmd_amplify,
    "kld-sweep": cmd_kld_sweep, "theory-verify": cmd_theory_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uepurify", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file with [run] [data] [attack] ... sections")
        p.add_argument("--out", help="run directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="overrides [run] seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("gen-ue", "purify", "ablate", "validate-disentangle", "detect", "amplify", "kld-sweep"):
            p.add_argument("--attack", choices=ATTACKS)
            p.add_argument("--data", help="directory holding train.uepd and test.uepd (default: generate)")
        if name in ("gen-ue", "purify", "ablate", "detect", "kld-sweep"):
            p.add_argument("--ratio", type=float, default=0.4 if name == "detect" else 1.0)
        if name in ("purify", "ablate", "kld-sweep"):
            p.add_argument("--input", help="unlearnable container to use instead of generating one")
        if name in ("train-dvae", "train-clf", "eval"):
            p.add_argument("--input", required=True)
        if name == "ablate":
            p.add_argument("--variant", required=True, choices=VARIANTS)
        if name == "train-clf":
            p.add_argument("--test")
        if name == "eval":
            p.add_argument("--model", required=True)
        if name == "amplify":
            p.add_argument("--fraction", type=float, default=0.05)
        if name == "kld-sweep":
            p.add_argument("--targets", default="0.25,0.5,1,2,3,6")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed its message
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "ratio", 1.0) is not None and not 0 < getattr(args, "ratio", 1.0) <= 1:
            raise ConfigError("--ratio must lie in (0, 1]")
        out = Path(args.out or cfg.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create run directory {out}: {e}") from e
        return COMMANDS[args.command](args, cfg, out)
    except ConfigError as e:
        print(f"uepurify: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"uepurify: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"uepurify: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
