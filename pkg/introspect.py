#!/usr/bin/env python
# Introspect - self-explanation experiments on small transformers
# Targets are trained on a synthetic world; explainers are fine-tuned copies that describe
# feature directions, activation patches and input ablations of a target.

import argparse
import logging
import os
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from utils import __version__
from utils.act_patch import (PatchSample, balance_patch_dataset, decode_location, generate_patch_samples, layer_chunks,
                             make_counterfactual_pairs, make_location_records, predict_branch, render_patch_record,
                             train_explainer_patch, verify_patch_labels)
from utils.baselines import FeatureIndex, selfie_describe, zero_shot_ablate, zero_shot_patch
from utils.checkpoint import load_checkpoint
from utils.codec_helpers import read_json, read_jsonl, write_json, write_jsonl, write_table
from utils.config import RunConfig, load_config
from utils.feature_desc import (ActivationCorpus, FeatureExplanationRecord, LabelGrammar, build_feature_dataset,
                                describe, label_features, layer_annotation_agreement, simulator_score,
                                subsample_fraction, top_exemplars, train_explainer_feat)
from utils.input_ablate import (HintedSample, balance_ablate_dataset, build_hint_following_target,
                                generate_ablate_samples, render_ablate_record, sweep_follow_fraction,
                                train_explainer_input, verify_ablate_labels)
from utils.manifest import ArtifactStore, RunManifest, StageOrderError, manifest_name
from utils.metrics import (PredictionRecord, ScoreReport, branch_accuracy, content_match, dot_similarity, exact_match,
                           format_p_value, lexical_judge, mean_stderr,
                           paired_t_test, sae_pattern_similarity, score_branch_task, spearman, welch_t_test)
from utils.projection import ProjectionSet, build_projections, canonical_mode, layer_map, pretrain_projection
from utils.sae import (SOURCES, FeatureDirection, SaeConfig, activation_features, collect_activations, delta_features,
                       extract_features, load_features, save_features, train_sae_set)
from utils.training import OptimizerConfig, fine_tune, save_loss_curve, split_groups
from utils.transformer import ModelConfig, Transformer
from utils.world import World, WorldConfig, fact_triple, gen_world

logger = logging.getLogger(__name__)

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_CONFIG = os.path.join(SCRIPT_DIR, "data", "raw", "desk_scale.cfg")

MODEL_IDS = ("A", "B")
EXPLAINER_TASKS = ("feat", "patch", "ablate", "location")
BASELINES = {"feat": ("nn-layer", "nn-all", "selfie"), "patch": ("zero-shot",), "ablate": ("zero-shot",)}
PRIMARY_METRIC = {"feat": "judge", "patch": "exact_match", "ablate": "exact_match"}
STAGES = ("world", "train-target", "train-sae", "label-features", "gen-patch", "gen-ablate", "pretrain-proj",
          "train-explainer", "baseline", "eval", "align", "sweep", "matrix", "report")
STAGE_ALIASES = {"gen-patch-data": "gen-patch", "gen-ablate-data": "gen-ablate"}
PATCH_TEMPLATES = 2
VERIFY_SAMPLES = 50
ALIGN_CORPUS = 64
EXEMPLARS_PER_FEATURE = 5

WORLD_PATH = "world.json"


def target_path(model_id: str) -> str:
    return f"models/target_{model_id}.ckpt"


def features_path(model_id: str, source: str) -> str:
    return f"features/{model_id}/{source.lower()}.jsonl"


def feature_set_path(model_id: str, split: str) -> str:
    return f"datasets/{model_id}/feat_{split}.jsonl"


def index_path(model_id: str) -> str:
    return f"indexes/{model_id}/feature_index.joblib"


def projection_path(explainer_id: str, target_id: str) -> str:
    return f"projections/{explainer_id}_on_{target_id}.ckpt"


def explainer_variant(task: str, explainer_id: str, target_id: str, mode: str, fraction: float,
                      flags: Sequence[str], seed: int) -> str:
    mode_part = canonical_mode(mode) if task in ("feat", "patch") else "plain"
    flag_part = "-".join(sorted(flags)) if flags else "full"
    return f"{task}__{explainer_id}_on_{target_id}__{mode_part}__f{fraction:g}__{flag_part}__s{seed}"


def baseline_variant(task: str, baseline: str, target_id: str) -> str:
    return f"{task}__{baseline}__{target_id}"


def feature_instance_id(record: FeatureExplanationRecord) -> str:
    return f"{record.source}:{record.feature_id}#t{record.template_id}"


def _check_model_id(model_id: str) -> None:
    if model_id not in MODEL_IDS:
        raise ValueError(f"Unknown model id {model_id!r}; expected one of {MODEL_IDS}")


class Introspector:
    def __init__(self, config: RunConfig, output_root: Optional[str] = None):
        self.config = config
        root = output_root or config.output_root
        if not os.path.isabs(root):
            root = os.path.join(SCRIPT_DIR, root)
        self.store = ArtifactStore(root)
        self._world: Optional[World] = None
        self._grammar: Optional[LabelGrammar] = None
        self._targets: Dict[str, Transformer] = {}
        self._corpora: Dict[str, ActivationCorpus] = {}

    # plumbing

    def _stage(self, stage: str, variant: str, inputs: Sequence[str],
               body: Callable[[], Tuple[List[str], Dict]], seed: Optional[int] = None) -> RunManifest:
        """Verify inputs, run `body`, then record its outputs. Failed stages leave no manifest."""
        name = manifest_name(stage, variant)
        hashes = self.store.verify_inputs(inputs)
        logger.info(f"Running stage {name}")
        start = time.time()
        try:
            outputs, extra = body()
        except Exception as e:
            logger.error(f"Stage {name} failed: {e}")
            raise
        manifest = RunManifest(stage, variant, self.config.hash(), self.config.seed if seed is None else seed,
                               __version__, round(time.time() - start, 3), inputs=hashes, extra=extra)
        return self.store.write_manifest(manifest, outputs)

    def run_stage(self, stage: str, **options):
        """Run one named stage with its keyword options."""
        stage = STAGE_ALIASES.get(stage, stage)
        handlers = {
            "world": self.build_world,
            "train-target": self.train_target,
            "train-sae": self.train_sae,
            "label-features": self.label_features,
            "gen-patch": self.gen_patch,
            "gen-ablate": self.gen_ablate,
            "pretrain-proj": self.pretrain_proj,
            "train-explainer": self.train_explainer,
            "baseline": self.run_baseline,
            "eval": self.evaluate,
            "align": self.align,
            "sweep": self.sweep_data_fraction,
            "matrix": self.run_matrix,
            "report": self.report,
        }
        if stage not in handlers:
            raise ValueError(f"Unknown stage {stage!r}; expected one of {STAGES}")
        return handlers[stage](**options)

    @property
    def world(self) -> World:
        if self._world is None:
            self.store.require_stage("world", "world")
            self._world = World.load(self.store.path(WORLD_PATH))
        return self._world

    @property
    def grammar(self) -> LabelGrammar:
        if self._grammar is None:
            self._grammar = LabelGrammar(self.world.vocab)
        return self._grammar

    def model_config(self, seed: int) -> ModelConfig:
        c = self.config
        return ModelConfig(c.n_layers, c.d_model, c.n_heads, len(self.world.vocab), c.context_length, c.mlp_ratio,
                           seed=seed)

    def target(self, model_id: str) -> Transformer:
        _check_model_id(model_id)
        if model_id not in self._targets:
            self.store.require_stage(manifest_name("train-target", model_id), f"train-target --target {model_id}")
            self._targets[model_id] = Transformer.load(self.store.path(target_path(model_id)), frozen=True)
        return self._targets[model_id]

    def activation_corpus(self, model_id: str) -> ActivationCorpus:
        if model_id not in self._corpora:
            self._corpora[model_id] = ActivationCorpus(self.target(model_id), self.world.label_corpus(),
                                                       range(self.config.n_layers), self.config.n_jobs)
        return self._corpora[model_id]

    def load_explainer(self, variant: str) -> Tuple[Transformer, Optional[ProjectionSet]]:
        path = self.store.path(f"models/explainers/{variant}.ckpt")
        if not os.path.exists(path):
            raise StageOrderError(f"Explainer {variant} has not been trained; run `train-explainer` first")
        _, tensors = load_checkpoint(path)
        projections = ProjectionSet.load(path) if any(k.startswith("proj.") for k in tensors) else None
        return Transformer.load(path, frozen=True), projections

    def _optimizer(self, seed: int) -> OptimizerConfig:
        c = self.config
        return OptimizerConfig(lr=c.explainer_lr, batch_size=c.explainer_batch_size, epochs=c.explainer_epochs,
                               seed=seed, log_every=c.log_every)

    # world and targets

    def build_world(self) -> World:
        c = self.config

        def body():
            world = gen_world(WorldConfig(c.n_subjects, c.n_relations, c.n_objects, c.n_text, c.text_min, c.text_max,
                                          c.n_questions, seed=c.seed))
            world.save(self.store.path(WORLD_PATH))
            self._world, self._grammar = world, None
            return [WORLD_PATH], {"vocab_size": len(world.vocab), "facts": len(world.facts),
                                  "questions": len(world.questions)}

        self._stage("world", "", [], body)
        return self._world

    def sweep_follow(self) -> float:
        """Pick the hint-follow fraction whose target changed-rate is nearest 0.5."""
        c = self.config
        path = "reports/follow_sweep.csv"

        def body():
            opt = OptimizerConfig(lr=c.target_lr, batch_size=c.target_batch_size, steps=c.target_steps, seed=c.seed,
                                  log_every=c.log_every)
            best, table = sweep_follow_fraction(self.world, self.model_config(c.seed), opt, c.follow_sweep)
            write_table(self.store.path(path), table, ["follow_fraction"])
            c.follow_fraction = best
            return [path], {"follow_fraction": best}

        self._stage("follow-sweep", "", [WORLD_PATH], body)
        logger.info(f"Using follow fraction {c.follow_fraction}")
        return c.follow_fraction

    def train_target(self, target: str = "A", sweep_follow: bool = False) -> Transformer:
        """Twin targets share the architecture but differ in seed and text half."""
        _check_model_id(target)
        if sweep_follow:
            self.sweep_follow()
        c = self.config
        part = MODEL_IDS.index(target)
        seed = c.seed + part
        loss_path = f"reports/loss_target_{target}.csv"

        def body():
            opt = OptimizerConfig(lr=c.target_lr, batch_size=c.target_batch_size, steps=c.target_steps, seed=seed,
                                  log_every=c.log_every)
            model, losses, rate = build_hint_following_target(self.world, self.model_config(seed), opt,
                                                              c.follow_fraction, part)
            model.save(self.store.path(target_path(target)))
            save_loss_curve(self.store.path(loss_path), losses)
            self._targets.pop(target, None)
            self._corpora.pop(target, None)
            return [target_path(target), loss_path], {"changed_rate": rate, "final_loss": losses[-1],
                                                      "follow_fraction": c.follow_fraction, "text_half": part}

        self._stage("train-target", target, [WORLD_PATH], body, seed)
        return self.target(target)

    # feature sources and labels

    def train_sae(self, target: str = "A") -> Dict[str, int]:
        c = self.config
        vocab = self.world.vocab
        counts: Dict[str, int] = {}

        def body():
            model = self.target(target)
            layers = list(range(c.n_layers))
            taps = collect_activations(model, self.world.label_corpus(), layers, c.n_jobs)
            sae_config = SaeConfig(c.sae_expansion, c.sae_l1, c.sae_steps, c.sae_lr, c.sae_batch_size, c.seed,
                                   c.log_every)
            saes = train_sae_set(taps, layers, sae_config, c.d_model, c.n_jobs)
            outputs = []
            for layer in layers:
                path = f"saes/{target}/layer_{layer:02d}.ckpt"
                saes[layer].save(self.store.path(path))
                outputs.append(path)
            stats_path = f"reports/sae_stats_{target}.csv"
            write_table(self.store.path(stats_path),
                        pd.DataFrame([{"layer": l, **saes[l].stats} for l in layers]), ["layer"])
            outputs.append(stats_path)

            pairs = make_counterfactual_pairs(self.world, c.seed, c.delta_pairs)
            encoded = [(vocab.encode(p.x.tokens()), vocab.encode(p.x_prime.tokens())) for p in pairs]
            deltas, skipped = [], 0
            for layer in layers:
                found, n = delta_features(model, encoded, layer)
                deltas.extend(found)
                skipped += n
            sources = {"SAE": extract_features(saes), "ACT": activation_features(taps, c.act_per_layer, c.seed),
                       "DACT": deltas}
            for source in SOURCES:
                counts[source] = save_features(self.store.path(features_path(target, source)), sources[source])
                outputs.append(features_path(target, source))
            return outputs, {"features": dict(counts), "dact_skipped": skipped,
                             "sae_stats": {str(l): saes[l].stats for l in layers}}

        self._stage("train-sae", target, [WORLD_PATH, target_path(target)], body)
        return counts

    def label_features(self, target: str = "A") -> Dict[str, int]:
        c = self.config
        vocab = self.world.vocab
        inputs = [WORLD_PATH, target_path(target)] + [features_path(target, s) for s in SOURCES]
        sizes: Dict[str, int] = {}

        def body():
            acorpus = self.activation_corpus(target)
            features = {s: load_features(self.store.path(features_path(target, s))) for s in SOURCES}
            labels = {}
            for source in SOURCES:
                labels.update(label_features(acorpus, self.grammar, features[source], c.min_label_score))
            labels_path = f"features/{target}/labels.jsonl"
            write_jsonl(self.store.path(labels_path),
                        [{"feature_id": fid, "label": label.key, "score": score}
                         for fid, (label, score) in sorted(labels.items())])

            sae = [f for f in features["SAE"] if f.id in labels]
            dataset = build_feature_dataset(sae, labels, self.grammar, c.n_layers, c.held_out_per_layer, c.seed)
            splits = {"train": dataset.train, "heldout": dataset.held_out}
            for source in ("ACT", "DACT"):
                labeled = [f for f in features[source] if f.id in labels]
                # every evaluation feature is rendered under every template
                splits[source.lower()] = build_feature_dataset(labeled, labels, self.grammar, c.n_layers, len(labeled),
                                                               c.seed).held_out if labeled else []
            outputs = [labels_path]
            for split, records in splits.items():
                sizes[split] = write_jsonl(self.store.path(feature_set_path(target, split)),
                                           [r.to_record(vocab) for r in records])
                outputs.append(feature_set_path(target, split))

            index = FeatureIndex.build([(r.feature_id, r.layer, r.vector, r.gold_label) for r in dataset.train])
            index.save(self.store.path(index_path(target)))
            outputs.append(index_path(target))
            return outputs, {"records": dict(sizes), "labeled": len(labels)}

        self._stage("label-features", target, inputs, body)
        return sizes

    def feature_records(self, target: str, split: str) -> List[FeatureExplanationRecord]:
        path = self.store.path(feature_set_path(target, split))
        if not os.path.exists(path):
            raise StageOrderError(f"Feature records for target {target} are missing; run `label-features` first")
        return [FeatureExplanationRecord.from_record(row, self.world.vocab) for row in read_jsonl(path)]

    # patch and ablate data

    def gen_patch(self, target: str = "A") -> pd.DataFrame:
        c = self.config
        vocab = self.world.vocab
        path = f"datasets/{target}/patch.jsonl"
        census_path = f"reports/census_patch_{target}.csv"
        result = {}

        def body():
            model = self.target(target)
            pairs = make_counterfactual_pairs(self.world, c.seed, c.patch_max_pairs)
            samples = generate_patch_samples(model, vocab, pairs, c.n_jobs)
            balanced, census = balance_patch_dataset(samples, c.patch_cap, c.seed)
            rng = np.random.default_rng(c.seed)
            picks = rng.choice(len(balanced), size=min(VERIFY_SAMPLES, len(balanced)), replace=False)
            reproducible = verify_patch_labels(model, vocab, [balanced[i] for i in sorted(picks.tolist())])
            if reproducible < 1.0:
                logger.warning(f"Only {reproducible:.3f} of sampled patch labels re-computed exactly")
            write_jsonl(self.store.path(path), [s.to_record() for s in balanced])
            write_table(self.store.path(census_path), census, ["token_type", "chunk", "has_changed"])
            result["census"] = census
            return [path, census_path], {"samples": len(samples), "kept": len(balanced),
                                         "label_reproducibility": reproducible}

        self._stage("gen-patch", target, [WORLD_PATH, target_path(target)], body)
        return result["census"]

    def gen_ablate(self, target: str = "A") -> pd.DataFrame:
        c = self.config
        path = f"datasets/{target}/ablate.jsonl"
        census_path = f"reports/census_ablate_{target}.csv"
        result = {}

        def body():
            model = self.target(target)
            samples, invalid = generate_ablate_samples(model, self.world, n_jobs=c.n_jobs)
            balanced, census = balance_ablate_dataset(samples, c.seed, c.ablate_cap or None)
            reproducible = verify_ablate_labels(model, self.world, balanced[:VERIFY_SAMPLES])
            if reproducible < 1.0:
                logger.warning(f"Only {reproducible:.3f} of sampled ablation labels re-computed exactly")
            write_jsonl(self.store.path(path), [s.to_record() for s in balanced])
            write_table(self.store.path(census_path), census, ["has_changed"])
            result["census"] = census
            return [path, census_path], {"samples": len(samples), "invalid": invalid, "kept": len(balanced),
                                         "label_reproducibility": reproducible}

        self._stage("gen-ablate", target, [WORLD_PATH, target_path(target)], body)
        return result["census"]

    def patch_split(self, target: str) -> Tuple[List[PatchSample], List[PatchSample]]:
        path = self.store.path(f"datasets/{target}/patch.jsonl")
        if not os.path.exists(path):
            raise StageOrderError(f"Patch data for target {target} is missing; run `gen-patch` first")
        samples = [PatchSample.from_record(row) for row in read_jsonl(path)]
        train, test = split_groups([s.pair_id for s in samples], self.config.test_fraction, self.config.seed)
        train, test = set(train), set(test)
        return [s for s in samples if s.pair_id in train], [s for s in samples if s.pair_id in test]

    def ablate_split(self, target: str) -> Tuple[List[HintedSample], List[HintedSample]]:
        path = self.store.path(f"datasets/{target}/ablate.jsonl")
        if not os.path.exists(path):
            raise StageOrderError(f"Ablation data for target {target} is missing; run `gen-ablate` first")
        samples = [HintedSample.from_record(row) for row in read_jsonl(path)]
        train, test = split_groups([s.question_id for s in samples], self.config.test_fraction, self.config.seed)
        train, test = set(train), set(test)
        return [s for s in samples if s.question_id in train], [s for s in samples if s.question_id in test]

    def location_split(self, target: str):
        c = self.config
        vocab = self.world.vocab
        rng = np.random.default_rng(c.seed)
        objects = vocab.classes["object"]
        prompts = [vocab.encode(fact_triple(f, objects, rng).tokens()) for f in self.world.facts[:c.probe_prompts]]
        records = make_location_records(self.target(target), vocab, prompts)
        train, test = split_groups([r.record_id.split("-")[0] for r in records], c.test_fraction, c.seed)
        train, test = set(train), set(test)
        return ([r for r in records if r.record_id.split("-")[0] in train],
                [r for r in records if r.record_id.split("-")[0] in test])

    # projections and explainers

    def pretrain_proj(self, explainer: str = "A", target: str = "A") -> Dict[int, float]:
        _check_model_id(explainer)
        path = projection_path(explainer, target)
        residuals: Dict[int, float] = {}

        def body():
            projections, found = pretrain_projection(self.target(target), self.target(explainer),
                                                     self.world.label_corpus())
            residuals.update(found)
            projections.save(self.store.path(path), {"residuals": {str(l): r for l, r in found.items()}})
            return [path], {"residuals": {str(l): r for l, r in found.items()}}

        self._stage("pretrain-proj", f"{explainer}_on_{target}", [WORLD_PATH, target_path(explainer),
                                                                  target_path(target)], body)
        return residuals

    def _data_inputs(self, task: str, target: str) -> List[str]:
        if task == "feat":
            return [feature_set_path(target, "train"), feature_set_path(target, "heldout")]
        if task == "patch":
            return [f"datasets/{target}/patch.jsonl"]
        if task == "ablate":
            return [f"datasets/{target}/ablate.jsonl"]
        return []

    def train_explainer(self, task: str = "feat", explainer: str = "A", target: str = "A",
                        mode: Optional[str] = None, fraction: Optional[float] = None,
                        ablate: Optional[Sequence[str]] = None, seed: Optional[int] = None) -> str:
        """Fine-tune a copy of `explainer` to explain `target`; returns the variant name."""
        c = self.config
        if task not in EXPLAINER_TASKS:
            raise ValueError(f"Unknown task {task!r}; expected one of {EXPLAINER_TASKS}")
        _check_model_id(explainer)
        _check_model_id(target)
        mode = canonical_mode(mode or c.projection_mode)
        fraction = c.fraction if fraction is None else fraction
        flags = tuple(sorted(set(c.ablate if ablate is None else ablate)))
        seed = c.seed if seed is None else seed
        if flags and task != "patch":
            raise ValueError(f"Ablation flags {flags} only apply to the patch task")
        if task == "location" and explainer != target:
            raise ValueError("The location probe explains the explainer's own residual stream; use one model id")

        variant = explainer_variant(task, explainer, target, mode, fraction, flags, seed)
        uses_projection = task == "feat" or (task == "patch" and "activation" not in flags)
        inputs = [WORLD_PATH, target_path(explainer), target_path(target)] + self._data_inputs(task, target)
        if uses_projection and mode != "random-init":
            inputs.append(projection_path(explainer, target))
        model_path = f"models/explainers/{variant}.ckpt"
        loss_path = f"reports/loss_{variant}.csv"
        history_path = f"reports/validation_{variant}.csv"
        vocab = self.world.vocab

        def body():
            model = self.target(explainer).clone()
            projections, trainable = None, False
            if uses_projection:
                pretrained = None if mode == "random-init" else ProjectionSet.load(
                    self.store.path(projection_path(explainer, target)))
                projections, trainable = build_projections(mode, self.target(target), model, [], seed, pretrained)
            opt = self._optimizer(seed)

            if task == "feat":
                records = subsample_fraction(self.feature_records(target, "train"), fraction, seed)
                validation = self.feature_records(target, "heldout")[:c.validation_size]
                on_epoch_end = lambda epoch, m: {"judge": float(np.mean(
                    self._feature_scores(target, validation, self._describer(m, projections))["judge"]))}
                losses, history = train_explainer_feat(model, records, projections, mode, opt, on_epoch_end)
            elif task == "patch":
                train, test = self.patch_split(target)
                rng = np.random.default_rng(seed)
                records = [render_patch_record(s, vocab, int(rng.integers(PATCH_TEMPLATES)), flags) for s in train]
                validation = [render_patch_record(s, vocab, 0, flags) for s in test[:c.validation_size]]
                on_epoch_end = lambda epoch, m: _branch_summary(self._predict_patch(m, projections, validation))
                losses, history = train_explainer_patch(model, records, projections, opt, trainable, on_epoch_end)
            elif task == "ablate":
                questions = {q.question_id: q for q in self.world.questions}
                train, test = self.ablate_split(target)
                records = [render_ablate_record(s, questions[s.question_id], vocab) for s in train]
                validation = [render_ablate_record(s, questions[s.question_id], vocab) for s in test[:c.validation_size]]
                on_epoch_end = lambda epoch, m: _branch_summary(self._predict_ablate(m, validation))
                losses, history = train_explainer_input(model, records, opt, on_epoch_end)
            else:
                train, test = self.location_split(target)
                records = train
                validation = test[:c.validation_size]
                on_epoch_end = lambda epoch, m: {"exact_match": float(np.mean(
                    self._location_hits(m, validation)))}
                losses, history = fine_tune(model, [r.to_example(vocab) for r in train], opt,
                                            on_epoch_end=on_epoch_end)

            model.save(self.store.path(model_path), projections.state_dict() if projections is not None else None)
            save_loss_curve(self.store.path(loss_path), losses)
            write_table(self.store.path(history_path), pd.DataFrame(history), ["epoch"])
            return [model_path, loss_path, history_path], {"records": len(records), "final_loss": losses[-1],
                                                           "mode": mode, "fraction": fraction, "flags": list(flags)}

        self._stage("train-explainer", variant, inputs, body, seed)
        return variant

    # prediction helpers

    def _describer(self, model: Transformer, projections: Optional[ProjectionSet]):
        vocab = self.world.vocab
        n_layers = self.config.n_layers
        return lambda r: describe(model, projections, r.vector, r.layer, r.template_id, vocab, n_layers)

    def _feature_scores(self, target: str, records: Sequence[FeatureExplanationRecord],
                        predict: Callable[[FeatureExplanationRecord], List[str]],
                        with_simulator: bool = False) -> pd.DataFrame:
        """Per-record predictions with lexical-judge and (optionally) simulator scores."""
        acorpus = self.activation_corpus(target)
        grammar = self.grammar
        cache: Dict[Tuple[str, str], float] = {}
        rows = []
        for r in records:
            predicted = predict(r)
            row = {"instance_id": feature_instance_id(r), "cell": r.source, "predicted": " ".join(predicted),
                   "gold": " ".join(grammar.get(r.gold_label).tokens),
                   "judge": lexical_judge(predicted, grammar.get(r.gold_label).tokens, grammar, acorpus.tokens)}
            if with_simulator:
                label = grammar.parse(predicted)
                key = (r.feature_id, label.key if label is not None else "")
                if key not in cache:
                    cache[key] = simulator_score(acorpus, grammar, r.vector, r.layer, label) if label else 0.0
                row["simulator"] = cache[key]
            rows.append(row)
        return pd.DataFrame(rows, columns=["instance_id", "cell", "predicted", "gold", "judge"]
                            + (["simulator"] if with_simulator else []))

    def _feature_eval_records(self, target: str) -> List[FeatureExplanationRecord]:
        return sum((self.feature_records(target, split) for split in ("heldout", "act", "dact")), [])

    def _predict_patch(self, model: Transformer, projections: Optional[ProjectionSet], records) -> List[PredictionRecord]:
        vocab = self.world.vocab
        return [PredictionRecord("patch", r.sample_id,
                                 predict_branch(model, projections, r.prompt_ids, r.slot_index, r.vector,
                                                r.projection_layer, vocab),
                                 vocab.decode(r.gold_ids)[:-1])
                for r in records]

    def _predict_ablate(self, model: Transformer, records) -> List[PredictionRecord]:
        vocab = self.world.vocab
        return [PredictionRecord("ablate", r.sample_id,
                                 predict_branch(model, None, r.prompt_ids, None, np.zeros(0), 0, vocab),
                                 vocab.decode(r.gold_ids)[:-1])
                for r in records]

    def _location_hits(self, model: Transformer, records) -> List[float]:
        chunks = layer_chunks(self.config.n_layers)
        return [float(decode_location(model, r.vector, r.x, self.world.vocab, chunks) == (r.position, r.chunk))
                for r in records]

    def _branch_records(self, task: str, target: str, flags: Sequence[str] = ()):
        """Test-split records rendered with template 0, plus a sample id -> breakdown cells map."""
        vocab = self.world.vocab
        if task == "patch":
            _, test = self.patch_split(target)
            cells = {s.sample_id: (f"type={s.token_type}", f"chunk={s.chunk}") for s in test}
            return [render_patch_record(s, vocab, 0, flags) for s in test], cells
        questions = {q.question_id: q for q in self.world.questions}
        _, test = self.ablate_split(target)
        cells = {s.sample_id: (f"style={s.style}",) for s in test}
        return [render_ablate_record(s, questions[s.question_id], vocab) for s in test], cells

    # baselines and evaluation

    def run_baseline(self, task: str = "feat", baseline: str = "nn-all", target: str = "A") -> str:
        if task not in BASELINES or baseline not in BASELINES[task]:
            raise ValueError(f"Unknown baseline {baseline!r} for task {task!r}; "
                             f"expected one of {BASELINES.get(task, ())}")
        variant = baseline_variant(task, baseline, target)
        path = f"predictions/{variant}.jsonl"
        inputs = [WORLD_PATH, target_path(target)]
        if task == "feat":
            inputs += [feature_set_path(target, s) for s in ("heldout", "act", "dact")] + [index_path(target)]
        else:
            inputs += self._data_inputs(task, target)

        def body():
            outputs = [path]
            model = self.target(target)
            vocab = self.world.vocab
            extra = {}
            if task == "feat":
                records = self._feature_eval_records(target)
                if baseline == "selfie":
                    results = {}
                    acorpus = self.activation_corpus(target)

                    def predict(r):
                        if r.feature_id not in results:
                            results[r.feature_id] = selfie_describe(model, r.vector, r.layer, acorpus, self.grammar)
                        return results[r.feature_id].tokens
                else:
                    index = FeatureIndex.load(self.store.path(index_path(target)))

                    def predict(r):
                        key = index.nn_layer(r.vector, r.layer) if baseline == "nn-layer" else index.nn_all(r.vector)
                        return self.grammar.get(key).tokens

                scores = self._feature_scores(target, records, predict)
                rows = [PredictionRecord("feat", row.instance_id, row.predicted.split(" ") if row.predicted else [],
                                         row.gold.split(" "), row.judge).to_record() for row in scores.itertuples()]
                if baseline == "selfie":
                    table_path = f"reports/selfie_scales_{target}.csv"
                    table = pd.DataFrame([{"feature_id": fid, "scale": s, "score": score}
                                          for fid, result in results.items() for s, score in result.per_scale.items()],
                                         columns=["feature_id", "scale", "score"])
                    write_table(self.store.path(table_path), table, ["feature_id", "scale"])
                    outputs.append(table_path)
            else:
                records, _ = self._branch_records(task, target)
                if task == "patch":
                    candidates = vocab.option_ids()
                    rows = [PredictionRecord("patch", r.sample_id, zero_shot_patch(model, r, vocab, candidates),
                                             vocab.decode(r.gold_ids)[:-1]).to_record() for r in records]
                else:
                    rows = [PredictionRecord("ablate", r.sample_id, zero_shot_ablate(model, r, vocab),
                                             vocab.decode(r.gold_ids)[:-1]).to_record() for r in records]
            extra["predictions"] = write_jsonl(self.store.path(path), rows)
            return outputs, extra

        self._stage("baseline", variant, inputs, body)
        return variant

    def evaluate(self, task: str = "feat", explainer: str = "A", target: str = "A", mode: Optional[str] = None,
                 fraction: Optional[float] = None, ablate: Optional[Sequence[str]] = None,
                 seed: Optional[int] = None, baseline: Optional[str] = None) -> ScoreReport:
        """Score a trained explainer, or a baseline's predictions when `baseline` is given."""
        c = self.config
        flags: Tuple[str, ...] = ()
        if baseline:
            variant = baseline_variant(task, baseline, target)
            self.store.require_stage(manifest_name("baseline", variant),
                                     f"baseline --task {task} --baseline {baseline} --target {target}")
            inputs = [f"predictions/{variant}.jsonl"]
            outputs = []
        else:
            mode = canonical_mode(mode or c.projection_mode)
            fraction = c.fraction if fraction is None else fraction
            flags = tuple(sorted(set(c.ablate if ablate is None else ablate)))
            seed = c.seed if seed is None else seed
            variant = explainer_variant(task, explainer, target, mode, fraction, flags, seed)
            self.store.require_stage(manifest_name("train-explainer", variant),
                                     f"train-explainer --task {task} --explainer {explainer} --target {target}")
            inputs = [f"models/explainers/{variant}.ckpt", target_path(target)] + self._data_inputs(task, target)
            if task == "feat":
                inputs += [feature_set_path(target, s) for s in ("act", "dact")]
            outputs = [] if task == "location" else [f"predictions/{variant}.jsonl"]
        scores_path = f"scores/{variant}.csv"
        report_csv = f"reports/eval_{variant}.csv"
        report_json = f"reports/eval_{variant}.json"
        result = {}

        def body():
            if baseline:
                predictions = [PredictionRecord.from_record(row)
                               for row in read_jsonl(self.store.path(f"predictions/{variant}.jsonl"))]
                report, scores = self._score_predictions(task, target, predictions)
            else:
                report, scores = self._score_explainer(task, target, variant, flags)
            write_table(self.store.path(scores_path), scores, ["instance_id"])
            write_table(self.store.path(report_csv), report.to_frame())
            write_json(self.store.path(report_json), report.to_dict())
            result["report"] = report
            return outputs + [scores_path, report_csv, report_json], {"metrics": report.to_dict()["metrics"]}

        self._stage("eval", variant, inputs, body)
        return result["report"]

    def _score_explainer(self, task: str, target: str, variant: str, flags: Sequence[str]):
        model, projections = self.load_explainer(variant)
        vocab = self.world.vocab
        if task == "location":
            _, test = self.location_split(target)
            hits = self._location_hits(model, test)
            report = ScoreReport()
            report.add("exact_match", hits)
            for ordinal in sorted({r.chunk for r in test}):
                report.add_cell(f"chunk={ordinal}", "exact_match", [h for h, r in zip(hits, test) if r.chunk == ordinal])
            scores = pd.DataFrame({"instance_id": [r.record_id for r in test], "cell": [f"chunk={r.chunk}" for r in test],
                                   "exact_match": hits})
            return report, scores

        if task == "feat":
            records = self._feature_eval_records(target)
            scores = self._feature_scores(target, records, self._describer(model, projections), with_simulator=True)
            predictions = [PredictionRecord("feat", row.instance_id, row.predicted.split(" ") if row.predicted else [],
                                            row.gold.split(" "), row.judge) for row in scores.itertuples()]
            report = _feature_report(scores)
            heldout = [r for r in records if r.source == "SAE" and r.template_id == 0][:self.config.validation_size]
            agreement = layer_annotation_agreement(model, projections, heldout, vocab, self.config.n_layers)
            report.annotations.update({f"layer_{k}_agreement": f"{v:.6f}" for k, v in agreement.items()})
        else:
            records, cells = self._branch_records(task, target, flags)
            predictions = (self._predict_patch(model, projections, records) if task == "patch"
                           else self._predict_ablate(model, records))
            report, scores = _branch_report(predictions, cells)
        write_jsonl(self.store.path(f"predictions/{variant}.jsonl"), [p.to_record() for p in predictions])
        return report, scores

    def _score_predictions(self, task: str, target: str, predictions: Sequence[PredictionRecord]):
        if task == "feat":
            by_id = {feature_instance_id(r): r for r in self._feature_eval_records(target)}
            predicted = {p.instance_id: p.predicted for p in predictions}
            scores = self._feature_scores(target, [by_id[i] for i in sorted(predicted)],
                                          lambda r: predicted[feature_instance_id(r)], with_simulator=True)
            return _feature_report(scores), scores
        _, cells = self._branch_records(task, target)
        return _branch_report(predictions, cells)

    # experiments

    def _ensure_explainer(self, task: str, explainer: str, target: str, mode: str, fraction: float,
                          seed: int) -> str:
        """Train and evaluate a variant unless its manifests already exist."""
        uses_projection = task in ("feat", "patch") and canonical_mode(mode) != "random-init"
        if uses_projection and not self.store.has_manifest(manifest_name("pretrain-proj", f"{explainer}_on_{target}")):
            self.pretrain_proj(explainer, target)
        variant = explainer_variant(task, explainer, target, mode, fraction, (), seed)
        if not self.store.has_manifest(manifest_name("train-explainer", variant)):
            self.train_explainer(task, explainer, target, mode, fraction, (), seed)
        if not self.store.has_manifest(manifest_name("eval", variant)):
            self.evaluate(task, explainer, target, mode, fraction, (), seed)
        return variant

    def instance_scores(self, variant: str) -> pd.DataFrame:
        path = self.store.path(f"scores/{variant}.csv")
        if not os.path.exists(path):
            raise StageOrderError(f"No scores for {variant}; run `eval` first")
        return pd.read_csv(path, dtype={"instance_id": str, "cell": str})

    def align(self, target: str = "A") -> pd.DataFrame:
        """Representation similarity against judge score across explainer variants of one target."""
        c = self.config
        twin = MODEL_IDS[1 - MODEL_IDS.index(target)]
        candidates = {
            "self": explainer_variant("feat", target, target, "joint", 1.0, (), c.seed),
            "twin": explainer_variant("feat", twin, target, "joint", 1.0, (), c.seed),
            "random-projection": explainer_variant("feat", target, target, "random-init", 1.0, (), c.seed),
            "pretrained-projection": explainer_variant("feat", target, target, "frozen-pretrained", 1.0, (), c.seed),
        }
        available = {}
        for name, variant in candidates.items():
            if self.store.has_manifest(manifest_name("train-explainer", variant)):
                available[name] = variant
            else:
                logger.warning(f"Alignment skips {name}: explainer {variant} has not been trained")
        if len(available) < 2:
            raise StageOrderError("Alignment needs at least two trained feature explainers of the target")
        table_path = f"reports/align_{target}.csv"
        summary_path = f"reports/align_{target}.json"
        inputs = [target_path(target), feature_set_path(target, "heldout")] + \
                 [f"models/explainers/{v}.ckpt" for v in available.values()]
        result = {}

        def body():
            model = self.target(target)
            heldout = self.feature_records(target, "heldout")
            features = {r.feature_id: FeatureDirection(r.feature_id, r.layer, r.vector, "SAE") for r in heldout}
            acorpus = self.activation_corpus(target)
            exemplars = {fid: top_exemplars(acorpus, f.vector, f.layer, EXEMPLARS_PER_FEATURE)
                         for fid, f in features.items()}
            corpus = self.world.label_corpus(ALIGN_CORPUS)
            rows = []
            for name, variant in sorted(available.items()):
                explainer, projections = self.load_explainer(variant)
                mapping = layer_map(c.n_layers, explainer.config.n_layers)
                judge = self._feature_scores(target, heldout, self._describer(explainer, projections))["judge"]
                rows.append({
                    "variant": name, "explainer": variant,
                    "dot_similarity": dot_similarity(explainer, model, corpus, mapping),
                    "pattern_similarity": sae_pattern_similarity(explainer, model, list(features.values()),
                                                                 exemplars, mapping),
                    "judge": float(np.mean(judge)),
                })
            table = pd.DataFrame(rows, columns=["variant", "explainer", "dot_similarity", "pattern_similarity", "judge"])
            write_table(self.store.path(table_path), table, ["variant"])
            summary = {"spearman_dot_judge": spearman(table.dot_similarity, table.judge),
                       "spearman_pattern_judge": spearman(table.pattern_similarity, table.judge),
                       "variants": sorted(available)}
            write_json(self.store.path(summary_path), summary)
            result["table"] = table
            return [table_path, summary_path], summary

        self._stage("align", target, inputs, body)
        return result["table"]

    def sweep_data_fraction(self, target: str = "A", explainers: Optional[Sequence[str]] = None,
                            fractions: Optional[Sequence[float]] = None,
                            seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
        """Explanation quality against training-set fraction, with NN-all retrieval at the same fractions."""
        c = self.config
        explainers = list(explainers or [target])
        fractions = sorted(fractions or c.sweep_fractions)
        seeds = list(seeds or c.experiment_seeds)
        if any(not 0 < f <= 1 for f in fractions):
            raise ValueError(f"Sweep fractions must lie in (0, 1], got {fractions}")
        mode = c.projection_mode

        variants = {}
        for fraction in fractions:
            for seed in seeds:
                # catches zero-record fractions before any training starts
                subsample_fraction(self.feature_records(target, "train"), fraction, seed)
        for fraction in fractions:
            for seed in seeds:
                for explainer in explainers:
                    variants[(fraction, explainer, seed)] = self._ensure_explainer("feat", explainer, target, mode,
                                                                                   fraction, seed)
        table_path = f"reports/sweep_{target}.csv"
        inputs = [feature_set_path(target, "train"), feature_set_path(target, "heldout")] + \
                 [f"scores/{v}.csv" for v in sorted(set(variants.values()))]
        result = {}

        def body():
            heldout = self.feature_records(target, "heldout")
            heldout_ids = sorted(feature_instance_id(r) for r in heldout)
            train = self.feature_records(target, "train")
            per_run: Dict[Tuple[float, str, int], pd.DataFrame] = {}
            for key, variant in variants.items():
                scores = self.instance_scores(variant)
                scores = scores[scores.cell == "SAE"]
                if sorted(scores.instance_id) != heldout_ids:
                    raise ValueError(f"Held-out ids of {variant} differ from the fixed held-out set")
                per_run[key] = scores
            for fraction in fractions:
                for seed in seeds:
                    subset = subsample_fraction(train, fraction, seed)
                    index = FeatureIndex.build([(r.feature_id, r.layer, r.vector, r.gold_label) for r in subset])
                    per_run[(fraction, "nn-all", seed)] = self._feature_scores(
                        target, heldout, lambda r: self.grammar.get(index.nn_all(r.vector)).tokens, with_simulator=True)
            rows = []
            for (fraction, name, seed), scores in per_run.items():
                for metric in ("judge", "simulator"):
                    mean, stderr, n = mean_stderr(scores[metric])
                    rows.append({"fraction": fraction, "explainer": name, "seed": str(seed), "metric": metric,
                                 "mean": mean, "stderr": stderr, "n": n})
            for fraction in fractions:
                for name in explainers + ["nn-all"]:
                    for metric in ("judge", "simulator"):
                        pooled = np.concatenate([per_run[(fraction, name, s)][metric].to_numpy() for s in seeds])
                        mean, stderr, n = mean_stderr(pooled)
                        rows.append({"fraction": fraction, "explainer": name, "seed": "all", "metric": metric,
                                     "mean": mean, "stderr": stderr, "n": n})
            table = pd.DataFrame(rows, columns=["fraction", "explainer", "seed", "metric", "mean", "stderr", "n"])
            write_table(self.store.path(table_path), table, ["fraction", "explainer", "seed", "metric"])
            result["table"] = table
            return [table_path], {"heldout_records": len(heldout_ids), "fractions": fractions, "seeds": seeds}

        self._stage("sweep", target, inputs, body)
        return result["table"]

    def run_matrix(self, task: str = "feat", seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
        """Every explainer on every target, with t-tests between self and cross cells in both views.

        Cells are paired on shared instance ids, except the by-explainer view of the feature task,
        where each target has its own features and Welch's test compares the two cells as independent samples.
        """
        if task not in PRIMARY_METRIC:
            raise ValueError(f"Unknown matrix task {task!r}; expected one of {tuple(PRIMARY_METRIC)}")
        c = self.config
        seeds = list(seeds or c.experiment_seeds)
        metric = PRIMARY_METRIC[task]
        variants = {}
        for seed in seeds:
            for target in MODEL_IDS:
                for explainer in MODEL_IDS:
                    variants[(target, explainer, seed)] = self._ensure_explainer(task, explainer, target,
                                                                                 c.projection_mode, 1.0, seed)
        table_path = f"reports/matrix_{task}.csv"
        cells_path = f"reports/matrix_{task}_cells.csv"
        summary_path = f"reports/matrix_{task}.json"
        inputs = [f"scores/{v}.csv" for v in sorted(set(variants.values()))]
        result = {}

        def body():
            pooled: Dict[Tuple[str, str], pd.Series] = {}
            cell_rows = []
            wins = {}
            for target in MODEL_IDS:
                for explainer in MODEL_IDS:
                    parts = []
                    for seed in seeds:
                        scores = self.instance_scores(variants[(target, explainer, seed)])
                        if task == "feat":
                            scores = scores[scores.cell == "SAE"]
                        parts.append(pd.Series(scores[metric].to_numpy(),
                                               index=[f"s{seed}/{i}" for i in scores.instance_id]))
                    series = pd.concat(parts)
                    pooled[(target, explainer)] = series
                    mean, stderr, n = mean_stderr(series)
                    cell_rows.append({"target": target, "explainer": explainer, "metric": metric, "mean": mean,
                                      "stderr": stderr, "n": n})
            for target in MODEL_IDS:
                for seed in seeds:
                    means = {e: self.instance_scores(variants[(target, e, seed)]) for e in MODEL_IDS}
                    means = {e: float(s[s.cell == "SAE"][metric].mean() if task == "feat" else s[metric].mean())
                             for e, s in means.items()}
                    wins[f"{target}/s{seed}"] = all(means[target] >= v for v in means.values())

            rows = []
            for view in ("by-target", "by-explainer"):
                for fixed in MODEL_IDS:
                    self_cell = (fixed, fixed)
                    for other in MODEL_IDS:
                        if other == fixed:
                            continue
                        cross_cell = (fixed, other) if view == "by-target" else (other, fixed)
                        a, b = pooled[self_cell], pooled[cross_cell]
                        # feature ids name different SAE features on different targets
                        independent = task == "feat" and view == "by-explainer"
                        if independent:
                            common = []
                            p = welch_t_test(a, b) if len(a) >= 2 and len(b) >= 2 else float("nan")
                        else:
                            common = sorted(set(a.index) & set(b.index))
                            p = paired_t_test(a[common], b[common]) if len(common) >= 2 else float("nan")
                        rows.append({"view": view, "fixed": fixed, "self_cell": "/".join(self_cell),
                                     "cross_cell": "/".join(cross_cell), "metric": metric,
                                     "self_mean": float(a.mean()), "cross_mean": float(b.mean()),
                                     "test": "welch" if independent else "paired", "n_pairs": len(common),
                                     "p_value": format_p_value(p) if np.isfinite(p) else "n/a"})
            table = pd.DataFrame(rows, columns=["view", "fixed", "self_cell", "cross_cell", "metric", "self_mean",
                                                "cross_mean", "test", "n_pairs", "p_value"])
            write_table(self.store.path(table_path), table, ["view", "fixed", "cross_cell"])
            write_table(self.store.path(cells_path), pd.DataFrame(cell_rows), ["target", "explainer"])
            write_json(self.store.path(summary_path), {"task": task, "seeds": seeds, "self_wins": wins})
            result["table"] = table
            return [table_path, cells_path, summary_path], {"self_wins": wins}

        self._stage("matrix", task, inputs, body)
        return result["table"]

    def report(self) -> pd.DataFrame:
        """Summary of every evaluation, with a provenance check back to the world manifest."""
        folder = self.store.path("reports")
        names = sorted(f for f in os.listdir(folder) if f.startswith("eval_") and f.endswith(".json")) \
            if os.path.isdir(folder) else []
        if not names:
            raise StageOrderError("No evaluation reports found; run `eval` first")
        inputs = [f"reports/{n}" for n in names]
        summary_path = "reports/summary.csv"
        provenance_path = "reports/provenance.json"
        result = {}

        def body():
            rows = []
            provenance = {}
            for relative in inputs:
                payload = read_json(self.store.path(relative))
                variant = os.path.basename(relative)[len("eval_"):-len(".json")]
                for metric, values in payload["metrics"].items():
                    rows.append({"variant": variant, "metric": metric, **values})
                chain = self.store.trace(relative)
                if "world" not in chain:
                    logger.warning(f"{relative} does not trace back to the world manifest")
                provenance[relative] = chain
            table = pd.DataFrame(rows, columns=["variant", "metric", "mean", "stderr", "n"])
            write_table(self.store.path(summary_path), table, ["variant", "metric"])
            write_json(self.store.path(provenance_path), provenance)
            result["table"] = table
            return [summary_path, provenance_path], {"reports": len(inputs)}

        self._stage("report", "", inputs, body)
        return result["table"]


def _branch_summary(predictions: Sequence[PredictionRecord]) -> Dict[str, float]:
    return {name: mean for name, (mean, _, _) in score_branch_task(predictions).metrics.items()}


def _feature_report(scores: pd.DataFrame) -> ScoreReport:
    report = ScoreReport()
    headline = scores[scores.cell == "SAE"]
    report.add("judge", headline.judge)
    report.add("simulator", headline.simulator)
    for cell, group in scores.groupby("cell", sort=True):
        report.add_cell(cell, "judge", group.judge)
        report.add_cell(cell, "simulator", group.simulator)
    return report


def _branch_report(predictions: Sequence[PredictionRecord], cells: Dict[str, Tuple[str, ...]]):
    report = score_branch_task(predictions)
    grouped: Dict[str, List[PredictionRecord]] = {}
    for p in predictions:
        for cell in cells.get(p.instance_id, ()):
            grouped.setdefault(cell, []).append(p)
    for cell, group in sorted(grouped.items()):
        cell_report = score_branch_task(group)
        report.breakdown[cell] = dict(cell_report.metrics)
    scores = pd.DataFrame([
        {"instance_id": p.instance_id, "cell": cells.get(p.instance_id, ("all",))[0],
         "exact_match": exact_match([p]), "content_match": content_match([p]),
         "branch_accuracy": branch_accuracy([p])}
        for p in predictions
    ], columns=["instance_id", "cell", "exact_match", "content_match", "branch_accuracy"])
    return report, scores


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="introspect", description="Self-explanation experiments on small transformers")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="key = value config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output root for artifacts")
    common.add_argument("--fraction", type=float, help="fraction of feature training records")
    common.add_argument("--ablate", action="append", choices=["activation", "layer", "token"],
                        help="prompt component to drop from patch explanations (repeatable)")
    common.add_argument("--mode", choices=["joint", "frozen", "random"], help="projection training mode")
    common.add_argument("--task", default="feat", choices=list(EXPLAINER_TASKS))
    common.add_argument("--explainer", default="A", choices=list(MODEL_IDS))
    common.add_argument("--target", default="A", choices=list(MODEL_IDS))
    common.add_argument("--baseline", choices=sorted({b for names in BASELINES.values() for b in names}))
    common.add_argument("--sweep-follow", action="store_true", help="pick the hint-follow fraction before training")
    common.add_argument("--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        commands.add_parser(stage, parents=[common])
    return parser


def run_command(introspector: Introspector, args: argparse.Namespace):
    options = {
        "world": {},
        "train-target": {"target": args.target, "sweep_follow": args.sweep_follow},
        "train-sae": {"target": args.target},
        "label-features": {"target": args.target},
        "gen-patch": {"target": args.target},
        "gen-ablate": {"target": args.target},
        "pretrain-proj": {"explainer": args.explainer, "target": args.target},
        "train-explainer": {"task": args.task, "explainer": args.explainer, "target": args.target},
        "baseline": {"task": args.task, "baseline": args.baseline or BASELINES.get(args.task, ("",))[0],
                     "target": args.target},
        "eval": {"task": args.task, "explainer": args.explainer, "target": args.target, "baseline": args.baseline},
        "align": {"target": args.target},
        "sweep": {"target": args.target},
        "matrix": {"task": args.task},
        "report": {},
    }[args.command]
    return introspector.run_stage(args.command, **options)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    overrides = {
        "seed": args.seed,
        "fraction": args.fraction,
        "projection_mode": canonical_mode(args.mode) if args.mode else None,
        "ablate": tuple(args.ablate) if args.ablate else None,
        "output_root": args.out,
    }
    try:
        config = load_config(args.config, {k: v for k, v in overrides.items() if v is not None})
        run_command(Introspector(config), args)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
