"""Command-line entry point: ``tlab {prepare-data,train,attack,eval,matrix,sweep,diag}``.

Exit codes: 0 success, 2 configuration or parse error, 3 numeric failure
(training divergence, non-finite attack gradient), 4 incompatible models.
"""

import argparse
import dataclasses
import logging
import os
import sys

import tomli

from . import attacks as atk
from . import evalharness as ev
from . import nn
from . import transforms as tf
from .data import export_mnist5k, load_idx_dataset
from .errors import (AttackError, ConfigError, LoadError, MetricError, ModelCompatibilityError, ShapeError,
                     TlabError, TrainingError)

log = logging.getLogger("tlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4
DEFAULT_SWEEP_SIZES = (0, 7, 10, 14, 17, 21)


def threads_from_env():
    try:
        return max(1, int(os.environ.get("TLAB_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"TLAB_THREADS must be an integer, got {os.environ['TLAB_THREADS']!r}") from None


def _require_file(path, what):
    if not path:
        raise ConfigError(f"missing {what}")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def load_config(path):
    if path is None:
        return {}
    _require_file(path, "config file")
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from None
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    data = cfg.get("data", {})
    for key in ("images", "labels"):
        if key in data:
            data[key] = resolve(data[key])
    if "out" in cfg.get("eval", {}):
        cfg["eval"]["out"] = resolve(cfg["eval"]["out"])
    for model in cfg.get("models", []):
        if "checkpoint" in model:
            model["checkpoint"] = resolve(model["checkpoint"])
    return cfg


def _pick(args, cfg, name, section=None, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    source = cfg.get(section, {}) if section else cfg
    return source.get(name, default)


def _dataset(args, cfg):
    images = _require_file(_pick(args, cfg, "images", "data"), "images file")
    labels = _require_file(_pick(args, cfg, "labels", "data"), "labels file")
    return load_idx_dataset(images, labels)


def _load_model(path):
    _require_file(path, "model checkpoint")
    return nn.load(path)


def _attack_spec(name, args, cfg_overrides=None, default_seed=0):
    overrides = dict(cfg_overrides or {})
    seed = args.seed if args.seed is not None else overrides.pop("seed", default_seed)
    overrides.pop("seed", None)
    eps = args.eps if args.eps is not None else overrides.pop("epsilon", atk.DEFAULT_EPSILON)
    alpha = args.alpha if args.alpha is not None else overrides.pop("alpha", None)
    iters = args.iters if args.iters is not None else overrides.pop("T", atk.DEFAULT_ITERS)
    samples = getattr(args, "samples", None) or overrides.pop("N", None)
    if alpha is None:
        alpha = min(atk.DEFAULT_ALPHA, eps) if eps > 0 else atk.DEFAULT_ALPHA
    spec = atk.preset(name, epsilon=eps, alpha=alpha, T=iters, seed=seed, N=samples)
    transform = getattr(args, "transform", None) or overrides.pop("transform", None)
    if transform is not None:
        spec = dataclasses.replace(spec, transform=tf.parse_transform(transform))
    if getattr(args, "mu", None) is not None:
        overrides["mu"] = args.mu
    if overrides:
        unknown = set(overrides) - {f.name for f in dataclasses.fields(atk.AttackSpec)}
        if unknown:
            raise ConfigError(f"unknown attack setting(s) for {name}: {', '.join(sorted(unknown))}")
        spec = dataclasses.replace(spec, **overrides)
    return spec


def _write_pair(csv_path, csv_text, md_text):
    ev.write_table(csv_path, csv_text)
    ev.write_table(ev.markdown_path(csv_path), md_text)
    print(f"wrote {csv_path} and {ev.markdown_path(csv_path)}")


# commands --------------------------------------------------------------------

def cmd_prepare_data(args):
    paths = export_mnist5k(args.out, seed=args.seed or 0)
    for key, path in paths.items():
        print(f"{key}: {path}")


def cmd_train(args):
    cfg = load_config(args.config)
    arch = nn.get_arch(_pick(args, cfg, "arch", "train", "cnn_a"))
    data = _dataset(args, cfg)
    test = None
    if args.test_images or args.test_labels:
        test = load_idx_dataset(_require_file(args.test_images, "test images file"),
                                _require_file(args.test_labels, "test labels file"))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    hp = {k: _pick(args, cfg, k, "train", v) for k, v in nn.TRAIN_DEFAULTS.items()}
    if not args.out:
        raise ConfigError("missing --out checkpoint path")
    net = nn.train(nn.build(arch, seed), data, seed=seed, test=test, **hp)
    nn.save(net, args.out)
    print(f"train accuracy {100 * net.meta['train_acc']:.2f}%")
    if test is not None:
        print(f"test accuracy {100 * net.meta['test_acc']:.2f}%")
    print(f"wrote {args.out}")


def cmd_attack(args):
    cfg = load_config(args.config)
    net = _load_model(args.model)
    spec = _attack_spec(args.attack, args, default_seed=cfg.get("seed", 0))
    data = _dataset(args, cfg)
    if args.subset:
        data = data.subset(args.subset, spec.seed)
    if not args.out:
        raise ConfigError("missing --out batch path")
    batch = atk.craft(spec, net, data.images, data.labels, batch_size=args.batch_size, threads=threads_from_env())
    atk.save_batch(batch, args.out)
    print(f"crafted {len(batch)} adversarial examples with {spec.name} ({spec.transform}); wrote {args.out}")


def cmd_eval(args):
    batch = atk.load_batch(_require_file(args.batch, "adversarial batch file"))
    targets = [_load_model(p) for p in _names(args.targets)]
    if not targets:
        raise ConfigError("no target models given")
    ev.check_compatible(targets)
    proxy = batch.proxy_name or batch.proxy_id
    report = ev.TransferReport()
    for target in targets:
        if tuple(target.input_shape) != batch.originals.shape[1:]:
            raise ModelCompatibilityError(f"{target.name} expects {target.input_shape}, batch holds "
                                          f"{batch.originals.shape[1:]}")
        res = ev.evaluate(target, batch)
        for mode in ev.MODES:
            if res.n(mode):
                report.rows.append(ev.TransferRow(proxy, target.name, batch.spec.name, str(batch.spec.transform),
                                                  res.asr(mode), res.clean_acc, res.n(mode), batch.spec.seed, mode))
    _write_pair(args.out, ev.report_csv(report), ev.report_markdown(report))


def _roster(args, cfg, role):
    flag = getattr(args, role + "s", None) if role != "proxy" else args.proxies
    if flag:
        return _names(flag)
    picked = [m["checkpoint"] for m in cfg.get("models", []) if m.get("role", "both") in (role, "both")]
    return picked


def _validate_roster(paths, what):
    if not paths:
        raise ConfigError(f"empty {what} roster")
    for p in paths:
        _require_file(p, f"{what} checkpoint")


def cmd_matrix(args):
    cfg = load_config(args.config)
    proxy_paths, target_paths = _roster(args, cfg, "proxy"), _roster(args, cfg, "target")
    _validate_roster(proxy_paths, "proxy")
    _validate_roster(target_paths, "target")
    if args.attacks:
        attack_cfgs = [(n, {}) for n in _names(args.attacks)]
    else:
        attack_cfgs = [(a["name"], {k: v for k, v in a.items() if k != "name"}) for a in cfg.get("attacks", [])]
    if not attack_cfgs:
        raise ConfigError("empty attack roster")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    specs = [_attack_spec(name, args, over, seed) for name, over in attack_cfgs]
    out = _pick(args, cfg, "out", "eval")
    if not out:
        raise ConfigError("missing --out report path")
    data = _dataset(args, cfg)
    data = data.subset(_pick(args, cfg, "subset", "eval", 1000), seed)
    proxies = [_load_model(p) for p in proxy_paths]
    targets = [_load_model(p) for p in target_paths]
    ev.check_compatible(proxies + targets)
    diagonal = args.diagonal or cfg.get("eval", {}).get("diagonal", False)
    report = ev.transfer_matrix(proxies, targets, specs, data, modes=ev.MODES, include_diagonal=diagonal,
                                batch_size=args.batch_size, threads=threads_from_env())
    _write_pair(out, ev.report_csv(report), ev.report_markdown(report))


def cmd_sweep(args):
    cfg = load_config(args.config)
    proxy_paths = _names(args.proxy) if args.proxy else _roster(args, cfg, "proxy")[:1]
    target_paths = _roster(args, cfg, "target")
    _validate_roster(proxy_paths, "proxy")
    _validate_roster(target_paths, "target")
    sizes = _pick(args, cfg, "sizes", "eval", DEFAULT_SWEEP_SIZES)
    sizes = _int_list(sizes) if isinstance(sizes, str) else [int(v) for v in sizes]
    if 0 not in sizes:
        raise ConfigError("sweep sizes must include 0 (the unmasked baseline)")
    out = _pick(args, cfg, "out", "eval")
    if not out:
        raise ConfigError("missing --out report path")
    base = _attack_spec(args.base or "maskblock", args, default_seed=cfg.get("seed", 0))
    data = _dataset(args, cfg)
    data = data.subset(_pick(args, cfg, "subset", "eval", 1000), base.seed)
    proxy = _load_model(proxy_paths[0])
    targets = [_load_model(p) for p in target_paths]
    ev.check_compatible([proxy] + targets)
    rows = ev.patch_sweep(proxy, targets, base, sizes, data, batch_size=args.batch_size, threads=threads_from_env())
    _write_pair(out, ev.sweep_csv(rows), ev.sweep_markdown(rows))


def cmd_diag(args):
    cfg = load_config(args.config)
    net = _load_model(args.model)
    data = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else 0
    if args.subset:
        data = data.subset(args.subset, seed)
    sizes = _int_list(args.sizes)
    if any(s < 0 or s > net.input_shape[1] for s in sizes):
        raise ConfigError(f"patch sizes must lie in [0, {net.input_shape[1]}]")
    if not args.out:
        raise ConfigError("missing --out report path")
    rows = tf.loss_preservation_curve(net, data, sizes, draws_per_image=args.draws, seed=seed, mode=args.mode)
    _write_pair(args.out, ev.curve_csv(rows), ev.curve_markdown(rows))


# parser ----------------------------------------------------------------------

def _add_data(p):
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")


def _add_attack(p, with_transform=True):
    p.add_argument("--eps", type=float, help=f"L-inf budget (default {atk.DEFAULT_EPSILON})")
    p.add_argument("--alpha", type=float, help=f"step size (default {atk.DEFAULT_ALPHA})")
    p.add_argument("--iters", type=int, help=f"iterations T (default {atk.DEFAULT_ITERS})")
    p.add_argument("--samples", type=int, help="transform draws N per iteration (default: sampler-specific)")
    p.add_argument("--mu", type=float, help="momentum decay for mi")
    if with_transform:
        p.add_argument("--transform", help="sampler string, e.g. maskblock:s=7,mode=grid,identity=true")
    p.add_argument("--batch-size", type=int, default=100, help="images per attack chunk")


def build_parser():
    parser = argparse.ArgumentParser(prog="tlab", description="Transferable adversarial example laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="export the bundled MNIST sample as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--arch", choices=sorted(nn.ARCHS))
    _add_data(p)
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft adversarial examples on one model")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    _add_data(p)
    p.add_argument("--attack", default="bim", choices=atk.PRESETS)
    _add_attack(p)
    p.add_argument("--subset", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="score an adversarial batch file against target models")
    p.add_argument("--batch", required=True)
    p.add_argument("--targets", required=True, help="comma-separated checkpoints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="proxy x target transfer matrix")
    p.add_argument("--config")
    p.add_argument("--proxies")
    p.add_argument("--targets")
    p.add_argument("--attacks", help=f"comma-separated presets: {', '.join(atk.PRESETS)}")
    _add_data(p)
    _add_attack(p, with_transform=False)
    p.add_argument("--subset", type=int)
    p.add_argument("--diagonal", action="store_true", help="also report white-box (proxy == target) cells")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("sweep", help="ASR over MaskBlock patch sizes")
    p.add_argument("--config")
    p.add_argument("--proxy")
    p.add_argument("--targets")
    p.add_argument("--base", choices=atk.PRESETS, help="attack whose sampler is swept (default maskblock)")
    p.add_argument("--sizes", help="comma-separated patch sizes including 0")
    _add_data(p)
    _add_attack(p, with_transform=False)
    p.add_argument("--subset", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diag", help="diagnostics")
    p.add_argument("which", choices=["loss-curve"])
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    _add_data(p)
    p.add_argument("--sizes", default="0,4,7,14")
    p.add_argument("--draws", type=int, default=8, help="masked draws per image")
    p.add_argument("--mode", choices=["grid", "diagonal"], default="grid")
    p.add_argument("--subset", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ModelCompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (TrainingError, AttackError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, LoadError, MetricError, TlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
