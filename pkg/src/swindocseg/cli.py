"""Command-line interface.

Exit codes: 0 success, 1 validation/config errors, 2 runtime failures.
"""

import json
import logging
import os
import sys

import click

from .config import load_config
from .matchloss import ConfigurationError, TrainingError
from .synthdoc import DatasetIOError, SynthConfig, generate_dataset, write_dataset

logging.basicConfig(level=os.environ.get("SWINDOCSEG_LOG", "INFO"))
log = logging.getLogger("swindocseg")

VALIDATION_ERRORS = (ConfigurationError, ValueError, KeyError, FileNotFoundError)


def _run(fn):
    try:
        fn()
        return 0
    except VALIDATION_ERRORS as e:
        log.error("validation error: %s", e)
        return 1
    except (TrainingError, DatasetIOError, IOError, RuntimeError) as e:
        log.error("runtime failure: %s", e)
        return 2


@click.group()
def main():
    """Document instance segmentation: synth data, training, eval, prediction."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", "num", required=True, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--image-size", default=256, type=int)
@click.option("--classes", default=5, type=int)
@click.option("--max-instances", default=4, type=int)
def synth(out_dir, num, seed, image_size, classes, max_instances):
    """Generate a synthetic layout dataset."""
    def go():
        cfg = SynthConfig(image_size=image_size, num_classes=classes,
                          max_instances=max_instances)
        samples = generate_dataset(num, cfg, seed0=seed)
        write_dataset(samples, out_dir, cfg)
        log.info("wrote %d samples to %s", num, out_dir)
    sys.exit(_run(go))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--resume", "resume_ckpt", default=None, type=click.Path(exists=True))
def train(config_path, resume_ckpt):
    """Train from scratch or resume from a checkpoint."""
    def go():
        from .harness import Trainer, load_checkpoint
        cfg = load_config(config_path)
        model, start = None, 0
        if resume_ckpt:
            model, _, payload = load_checkpoint(resume_ckpt, override_config=cfg)
            start = payload["step"]
        trainer = Trainer(cfg, model=model, start_step=start)
        os.makedirs(cfg.out_dir, exist_ok=True)
        final = trainer.run(log_path=os.path.join(cfg.out_dir, "metrics.jsonl"),
                            ckpt_dir=cfg.out_dir)
        log.info("final checkpoint: %s", final)
    sys.exit(_run(go))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--from", "from_ckpt", required=True, type=click.Path(exists=True))
def finetune(config_path, from_ckpt):
    """Fine-tune from a checkpoint with the domain-shift mask-weight schedule."""
    def go():
        from .harness import Trainer, load_checkpoint
        cfg = load_config(config_path)
        model, _, _payload = load_checkpoint(from_ckpt, override_config=cfg)
        trainer = Trainer(cfg, model=model, domain_shift=True)
        os.makedirs(cfg.out_dir, exist_ok=True)
        final = trainer.run(log_path=os.path.join(cfg.out_dir, "metrics.jsonl"),
                            ckpt_dir=cfg.out_dir)
        log.info("final checkpoint: %s", final)
    sys.exit(_run(go))


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--score-threshold", default=0.05, type=float)
def eval_cmd(ckpt, data_dir, score_threshold):
    """Evaluate a checkpoint: mask/box AP on a dataset directory."""
    def go():
        from .harness import evaluate_model, load_checkpoint
        from .synthdoc import read_dataset
        model, _, _ = load_checkpoint(ckpt)
        samples = read_dataset(data_dir)
        report = evaluate_model(model, samples, score_threshold=score_threshold)
        click.echo(json.dumps(report.as_dict(), indent=1))
    sys.exit(_run(go))


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--score-threshold", default=0.5, type=float)
def predict(ckpt, image_path, out_dir, score_threshold):
    """Predict instances for one image: JSON (RLE masks) + overlay PNG."""
    def go():
        from .harness import load_checkpoint, predict_image_file
        model, _, _ = load_checkpoint(ckpt)
        json_path, overlay_path = predict_image_file(
            model, image_path, out_dir, score_threshold=score_threshold)
        log.info("wrote %s and %s", json_path, overlay_path)
    sys.exit(_run(go))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--num-params", default=10, type=int)
def gradcheck(config_path, num_params):
    """Finite-difference gradient check at float64."""
    def go():
        from .harness import gradcheck_model
        cfg = load_config(config_path)
        report = gradcheck_model(cfg, num_params=num_params)
        click.echo(json.dumps(
            {"max_rel_err": report["max_rel_err"], "loss": report["loss"]}, indent=1))
    sys.exit(_run(go))


if __name__ == "__main__":
    main()
