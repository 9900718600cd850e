"""Four-stage training pipeline: cleanse, dev-set construction, judge
distillation, and consistency-assisted final training.

Stage 1 cleanses the raw records. Stage 2 trains a preliminary model without
the semantic task, scores the cleansed corpus, and builds the
confidence-stratified dev set. Stage 3 oracle-labels the dev set and distills
the lightweight judge. Stage 4 annotates the full corpus with the distilled
judge and trains the final model with both objectives. Each stage writes its
artifact into the output directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .dataset import (
    ProductRecord,
    ScoredRecord,
    SplitSpec,
    cleanse,
    stratified_dev_sample,
    split,
    write_records,
)
from .encoder import EncoderConfig, build_field_vocabs
from .infer import predict_batch, prediction_to_dict
from .metrics import evaluate
from .moe import MoEConfig, MoEModel, init_model, save_checkpoint
from .semantic import distill_judge, oracle_judge, annotate_corpus, save_judge
from .taxonomy import Taxonomy
from .train import LossWeights, TrainConfig, fit
from .util import atomic_write_text, write_jsonl


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = EncoderConfig()
    moe: MoEConfig = MoEConfig()
    train: TrainConfig = TrainConfig()
    split: SplitSpec = SplitSpec(0.64, 0.16, 0.20)
    confidence_threshold: float = 0.9
    high_conf_fraction: float = 0.05
    tau_leaf: float = 0.5
    oracle_y_threshold: float = 0.5
    oracle_n_threshold: float = 0.1
    seed: int = 0


def score_records(
    model: MoEModel,
    records: list[ProductRecord],
    taxonomy: Taxonomy,
    tau_leaf: float = 0.5,
) -> list[ScoredRecord]:
    """Prediction confidence and correctness for every record."""
    preds = predict_batch(model, records, taxonomy, tau_leaf=tau_leaf, use_repath=False)
    return [
        ScoredRecord(
            record=rec,
            predicted_leaf=pred.selected_leaf,
            confidence=min(1.0, max(0.0, pred.leaf_confidence)),
            correct=pred.selected_leaf == rec.leaf(),
        )
        for rec, pred in zip(records, preds)
    ]


def run_pipeline(
    raw_records: list[ProductRecord],
    taxonomy: Taxonomy,
    config: PipelineConfig,
    out_dir: str | Path,
) -> tuple[MoEModel, dict[str, Path]]:
    """Run all four stages; returns the final model and the artifact paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    seed = config.seed

    def stage(index: int, fn):
        try:
            return fn()
        except Exception as exc:
            raise PipelineError(f"stage {index}: {exc}") from exc

    # Stage 1: cleanse
    def stage1():
        kept, _rejected = cleanse(raw_records, taxonomy)
        artifacts["cleansed"] = out / "cleansed.jsonl"
        write_records(artifacts["cleansed"], kept)
        return kept

    kept = stage(1, stage1)

    # Stage 2: preliminary model, scoring, stratified dev set
    def stage2():
        spec = replace(config.split, seed=seed)
        train_recs, val_recs, test_recs = split(kept, spec)
        enc_cfg = replace(
            config.encoder,
            field_vocabs=build_field_vocabs(train_recs, config.encoder.fields),
            seed=seed,
        )
        prelim_cfg = replace(
            config.train,
            seed=seed,
            loss_weights=replace(config.train.loss_weights, omega_s=1.0),
        )
        prelim = init_model(taxonomy, enc_cfg, config.moe, seed)
        prelim, _ = fit(prelim, train_recs, val_recs, taxonomy, None, prelim_cfg)
        scored = score_records(prelim, kept, taxonomy, config.tau_leaf)
        dev = stratified_dev_sample(
            scored, config.confidence_threshold, config.high_conf_fraction, seed
        )
        artifacts["dev"] = out / "dev.jsonl"
        write_records(artifacts["dev"], dev)
        return train_recs, val_recs, test_recs, enc_cfg, dev

    train_recs, val_recs, test_recs, enc_cfg, dev = stage(2, stage2)

    # Stage 3: oracle labels on the dev set, judge distillation
    def stage3():
        labeled = [
            (
                r.title,
                r.leaf(),
                oracle_judge(
                    r.title,
                    r.leaf(),
                    taxonomy,
                    config.oracle_y_threshold,
                    config.oracle_n_threshold,
                ),
            )
            for r in dev
        ]
        judge = distill_judge(labeled, taxonomy, seed)
        artifacts["judge"] = out / "judge.ckpt"
        save_judge(judge, artifacts["judge"])
        return judge

    judge = stage(3, stage3)

    # Stage 4: annotate the corpus, train the final model, evaluate
    def stage4():
        annotations = annotate_corpus(kept, judge, taxonomy)
        artifacts["annotated"] = out / "annotated.jsonl"
        write_jsonl(
            artifacts["annotated"],
            (
                {"id": rec_id, "verdict": lab.verdict, "rationale": lab.rationale}
                for rec_id, lab in annotations.items()
            ),
        )
        final_cfg = replace(config.train, seed=seed)
        final = init_model(taxonomy, enc_cfg, config.moe, seed)
        final, _ = fit(final, train_recs, val_recs, taxonomy, judge, final_cfg)
        artifacts["final"] = out / "final.ckpt"
        save_checkpoint(final, artifacts["final"])

        preds = predict_batch(final, test_recs, taxonomy, config.tau_leaf, use_repath=False)
        base = evaluate([prediction_to_dict(r.id, p) for r, p in zip(test_recs, preds)], test_recs, taxonomy)
        preds_rp = predict_batch(final, test_recs, taxonomy, config.tau_leaf, use_repath=True)
        rp = evaluate([prediction_to_dict(r.id, p) for r, p in zip(test_recs, preds_rp)], test_recs, taxonomy)
        artifacts["metrics"] = out / "metrics.json"
        atomic_write_text(
            artifacts["metrics"],
            json.dumps(
                {"test": {"base": base.to_dict(), "repath": rp.to_dict()}},
                indent=2,
                sort_keys=True,
            )
            + "\n",
        )
        return final

    final = stage(4, stage4)
    return final, artifacts
