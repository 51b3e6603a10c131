"""Command-line front door.

Subcommands: gen-data, train-denoiser, pretrain-head, train-cascade,
denoise, evaluate. Every command is deterministic given its config and
seed; `--deterministic` additionally pins the BLAS thread count to 1 so
reduction order is fixed. CDNZ_THREADS caps internal parallelism.

Exit codes: 0 success, 2 invalid config, 3 checkpoint/task mismatch,
4 missing input file, 1 other errors.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import cascade as casc
from . import data as dat
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .denoiser import build_denoiser, denoise_forward, train_denoiser
from .highlevel import (evaluate_head, freeze, head_from_checkpoint, head_meta,
                        make_head, pretrain_head)
from .metrics import MetricsReport
from .tensor import Tensor
from .training import OptimizerSchedule

log = logging.getLogger("cdnz")

EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_MISSING = 4


class MismatchError(RuntimeError):
    """Checkpoint metadata incompatible with the requested command."""


def _limit_threads(deterministic):
    n = 1 if deterministic else int(os.environ.get("CDNZ_THREADS", "0") or 0)
    if n > 0:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=n)
        except ImportError:
            log.warning("threadpoolctl unavailable; cannot cap BLAS threads")


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.set("experiment", "seed", args.seed)
    if getattr(args, "sigma", None) is not None:
        cfg.set("experiment", "sigma", args.sigma)
    if getattr(args, "lam", None) is not None:
        cfg.set("experiment", "lambda", args.lam)
    if getattr(args, "out", None) is not None:
        cfg.set("paths", "out_dir", args.out)
    if getattr(args, "deterministic", False):
        cfg.set("experiment", "deterministic", True)
    cfg.validate()
    _limit_threads(cfg.get("experiment", "deterministic"))
    return cfg


def _prepare_out(cfg):
    out = cfg.get("paths", "out_dir")
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "resolved.ini"))
    return out


def _require_file(path, what):
    if not path:
        raise FileNotFoundError(f"{what} not configured")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_images_manifest(manifest):
    entries = dat.read_manifest(manifest)
    images, names = [], []
    for path, _label in entries:
        images.append(dat.read_image(path))
        names.append(path)
    return images, names


def _load_labeled_manifest(manifest, kind):
    entries = dat.read_manifest(manifest)
    images, labels = [], []
    for path, label in entries:
        images.append(dat.read_image(path))
        if kind == "classification":
            labels.append(int(label))
        else:
            labels.append(dat.read_pgm(os.path.join(os.path.dirname(manifest), label)
                                       if not os.path.isabs(label) else label))
    images = np.stack(images).astype(np.float32)
    labels = np.stack(labels).astype(np.int64) if kind == "segmentation" \
        else np.asarray(labels, dtype=np.int64)
    if kind == "classification":
        k = int(labels.max()) + 1
    else:
        k = int(labels[labels != 255].max()) + 1
    return dat.LabeledDataset(images, labels, kind, k)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "denoise":
        size = args.image_size or 64
        train = dat.generate_image_corpus(args.count, args.seed, image_size=size)
        test = dat.generate_image_corpus(max(4, args.count // 5), args.seed + 1,
                                         image_size=size)
        for split, images in (("train", train), ("test", test)):
            entries = []
            for i, img in enumerate(images):
                rel = f"{split}_{i:05d}.ppm"
                dat.write_ppm(img, os.path.join(args.out, rel))
                entries.append((rel, "-"))
            dat.write_manifest(os.path.join(args.out, f"{split}.manifest"), entries)
        log.info("wrote %d train / %d test images to %s", len(train), len(test), args.out)
        return 0

    size = args.image_size or 32
    toy = dat.generate_toy(args.kind, args.count, args.seed, image_size=size)
    for split, ds in (("train", toy.train), ("test", toy.test)):
        entries = []
        for i in range(len(ds)):
            rel = f"{split}_{i:05d}.ppm"
            dat.write_ppm(ds.images[i], os.path.join(args.out, rel))
            if args.kind == "classification":
                entries.append((rel, str(int(ds.labels[i]))))
            else:
                mrel = f"{split}_{i:05d}_mask.pgm"
                dat.write_pgm(ds.labels[i], os.path.join(args.out, mrel))
                entries.append((rel, mrel))
        dat.write_manifest(os.path.join(args.out, f"{split}.manifest"), entries)
    log.info("wrote %s dataset (%d train / %d test) to %s",
             args.kind, len(toy.train), len(toy.test), args.out)
    return 0


def cmd_train_denoiser(args):
    cfg = _load_config(args)
    if cfg.get("experiment", "task") != "none" and cfg.get("experiment", "lambda") != 0.0:
        raise ConfigError("train-denoiser requires task=none or lambda=0")
    out = _prepare_out(cfg)
    manifest = _require_file(cfg.get("data", "train_manifest"), "train manifest")
    images, names = _load_images_manifest(manifest)
    sched = cfg.schedule()
    seed = cfg.get("experiment", "seed")
    sigma = cfg.get("experiment", "sigma")
    stream = dat.PatchStream(images, sigma=sigma, patch_size=sched.patch_size,
                             batch_size=sched.batch_size, seed=seed,
                             fresh_noise=cfg.get("training", "fresh_noise"), names=names)
    net = build_denoiser(cfg.denoiser_config(), seed=seed)
    warm = cfg.get("paths", "warm_start")
    if warm:
        arrays, _meta = load_checkpoint(_require_file(warm, "warm-start checkpoint"))
        net.load_state_arrays(arrays)
    tlog = train_denoiser(net, stream, sched, log_every=max(1, sched.total_iters // 20))
    ckpt = os.path.join(out, "denoiser.cdnz")
    casc.save_denoiser_checkpoint(ckpt, net, sigma, iteration=sched.total_iters)
    tlog.save(os.path.join(out, "log.txt"))
    log.info("held-out mse %.6f -> %.6f; checkpoint %s",
             tlog.initial_eval, tlog.final_eval, ckpt)
    return 0


def cmd_pretrain_head(args):
    cfg = _load_config(args)
    task = cfg.get("experiment", "task")
    if task == "none":
        raise ConfigError("pretrain-head requires task=classification or segmentation")
    out = _prepare_out(cfg)
    train = _load_labeled_manifest(
        _require_file(cfg.get("data", "train_manifest"), "train manifest"), task)
    test = _load_labeled_manifest(
        _require_file(cfg.get("data", "test_manifest"), "test manifest"), task)
    seed = cfg.get("experiment", "seed")
    toy = dat.ToyDataset(task, train.num_classes, seed, train, test)
    head = make_head(task, train.num_classes, seed=seed)
    tlog = pretrain_head(head, toy, cfg.schedule(),
                         target_metric=cfg.pretrain_target(), seed=seed)
    tlog.save(os.path.join(out, "log.txt"))
    if not tlog.reached_target:
        log.error("pretraining failed its gate: %.4f < %.4f",
                  tlog.achieved_metric, tlog.target_metric)
        return 1
    ckpt = os.path.join(out, "head.cdnz")
    save_checkpoint(ckpt, head.state_arrays(), head_meta(head))
    log.info("head metric %.4f; checkpoint %s", tlog.achieved_metric, ckpt)
    return 0


def cmd_train_cascade(args):
    cfg = _load_config(args)
    task = cfg.get("experiment", "task")
    if task == "none":
        raise ConfigError("train-cascade requires task=classification or segmentation")
    out = _prepare_out(cfg)
    head_path = _require_file(cfg.get("paths", "head_checkpoint"), "head checkpoint")
    arrays, meta = load_checkpoint(head_path)
    if meta.get("kind") != task:
        raise MismatchError(
            f"head checkpoint is for task {meta.get('kind')!r}, config wants {task!r}")
    head = head_from_checkpoint(arrays, meta)
    freeze(head)

    seed = cfg.get("experiment", "seed")
    net = build_denoiser(cfg.denoiser_config(), seed=seed)
    warm = cfg.get("paths", "warm_start")
    if warm:
        warm_arrays, warm_meta = load_checkpoint(_require_file(warm, "warm-start checkpoint"))
        net.load_state_arrays(warm_arrays)
        if float(warm_meta.get("sigma", "nan")) != cfg.get("experiment", "sigma"):
            log.warning("warm-start checkpoint sigma %s != config sigma %g",
                        warm_meta.get("sigma"), cfg.get("experiment", "sigma"))

    train = _load_labeled_manifest(
        _require_file(cfg.get("data", "train_manifest"), "train manifest"), task)
    ccfg = casc.CascadeConfig(
        lam=cfg.get("experiment", "lambda"), sigma=cfg.get("experiment", "sigma"),
        task=task, schedule=cfg.schedule(), seed=seed,
        fresh_noise=cfg.get("training", "fresh_noise"))
    cas = casc.Cascade(net, head, ccfg)
    tlog = casc.train_cascade(cas, train, log_every=max(1, ccfg.schedule.total_iters // 20))
    ckpt = os.path.join(out, "cascade_denoiser.cdnz")
    casc.save_denoiser_checkpoint(
        ckpt, net, ccfg.sigma, iteration=ccfg.schedule.total_iters,
        extra_meta={"task": task, "lambda": f"{ccfg.lam:g}"})
    tlog.save(os.path.join(out, "log.txt"))
    log.info("checkpoint %s", ckpt)
    return 0


def cmd_denoise(args):
    _limit_threads(args.deterministic)
    net, meta = casc.load_denoiser_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    img = dat.read_image(_require_file(args.in_image, "input image"))
    out = denoise_forward(net, Tensor(img[None]))
    dat.write_image(out.data[0], args.out_image)
    log.info("denoised %s (trained at sigma=%s) -> %s",
             args.in_image, meta.get("sigma"), args.out_image)
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    task = cfg.get("experiment", "task")
    if task == "none":
        raise ConfigError("evaluate requires task=classification or segmentation")
    out = _prepare_out(cfg)
    variant = args.variant
    sigma = cfg.get("experiment", "sigma")
    seed = cfg.get("experiment", "seed")

    head_path = _require_file(cfg.get("paths", "head_checkpoint"), "head checkpoint")
    arrays, meta = load_checkpoint(head_path)
    if meta.get("kind") != task:
        raise MismatchError(
            f"head checkpoint is for task {meta.get('kind')!r}, config wants {task!r}")
    head = head_from_checkpoint(arrays, meta)
    freeze(head)

    testset = _load_labeled_manifest(
        _require_file(cfg.get("data", "test_manifest"), "test manifest"), task)

    denoiser = None
    if variant != "vgg":
        dpath = _require_file(cfg.get("paths", "denoiser_checkpoint"), "denoiser checkpoint")
        if variant == "cross":
            cas = casc.plug_cross_task(dpath, head, expect_sigma=sigma)
            denoiser = cas.denoiser
            dmeta = cas.denoiser_meta
            if dmeta.get("task") in (None, "", task):
                raise MismatchError(
                    f"cross variant expects a checkpoint trained with a different task, "
                    f"got {dmeta.get('task')!r}")
        else:
            denoiser, dmeta = casc.load_denoiser_checkpoint(dpath)
            ck_task = dmeta.get("task", "")
            if variant == "joint" and ck_task != task:
                raise MismatchError(
                    f"joint variant expects a checkpoint trained with task {task!r}, "
                    f"got {ck_task!r}")
            if variant == "separate" and ck_task not in ("", "none"):
                raise MismatchError(
                    f"separate variant expects a task-free checkpoint, got {ck_task!r}")
            if float(dmeta.get("sigma", "nan")) != sigma:
                log.warning("checkpoint sigma %s != evaluation sigma %g",
                            dmeta.get("sigma"), sigma)

    report = casc.run_pipeline(variant, testset, sigma, head, denoiser=denoiser, seed=seed)
    path = os.path.join(out, "report.txt")
    report.save(path)
    for line in report.lines():
        print(line)
    for line in report.table():
        print("# " + line)
    log.info("report written to %s", path)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cdnz",
                                description="multi-scale residual denoiser with "
                                            "task-guided joint training")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (INI)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--sigma", type=float, default=None)
        sp.add_argument("--lambda", dest="lam", type=float, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded fixed reduction order")

    sp = sub.add_parser("gen-data", help="write a toy dataset + manifests")
    sp.add_argument("--kind", required=True,
                    choices=["classification", "segmentation", "denoise"])
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-denoiser", help="train a denoiser at one noise level")
    common(sp)
    sp.set_defaults(fn=cmd_train_denoiser)

    sp = sub.add_parser("pretrain-head", help="pretrain a task head on clean data")
    common(sp)
    sp.set_defaults(fn=cmd_pretrain_head)

    sp = sub.add_parser("train-cascade", help="joint-train denoiser + frozen head")
    common(sp)
    sp.set_defaults(fn=cmd_train_cascade)

    sp = sub.add_parser("denoise", help="denoise one image file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="in_image", required=True)
    sp.add_argument("--out", dest="out_image", required=True)
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(fn=cmd_denoise)

    sp = sub.add_parser("evaluate", help="evaluate a pipeline variant")
    common(sp)
    sp.add_argument("--variant", required=True, choices=list(casc.VARIANTS))
    sp.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MismatchError as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
