"""Ablation arms and end-to-end train/evaluate runs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

from .config import ExperimentConfig
from .data import StudyPair, SyntheticSpec, build_vocabulary, generate_corpus, split_dataset
from .evaluation import embed_corpus, evaluate_recall
from .preprocessing import Vocabulary
from .training import EncodedCorpus, init_state, steps_per_epoch, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    components: str
    input_mode: str
    align_strategy: str
    lambda_mim: bool = True
    lambda_mrm: bool = True

    def apply(self, config: ExperimentConfig) -> ExperimentConfig:
        return config.replace(
            input_mode=self.input_mode,
            align_strategy=self.align_strategy,
            lambda_mim=config.lambda_mim if self.lambda_mim else 0.0,
            lambda_mrm=config.lambda_mrm if self.lambda_mrm else 0.0,
        )


ARMS = {
    "a": Arm("a", "MC + MIM", "masked_only", "AbM", lambda_mrm=False),
    "b": Arm("b", "MC + MRM", "masked_only", "AbM", lambda_mim=False),
    "c": Arm("c", "Con + MIM + MRM", "dual_input", "AbM"),
    "d": Arm("d", "MC + MIM + MRM", "masked_only", "AbM"),
    "e": Arm("e", "Con + MIM + MRM + MbA", "dual_input", "MbA"),
    "f": Arm("f", "MC + MIM + MRM + MbA", "masked_only", "MbA"),
}


def default_corpus(n_train: int = 2000, n_test: int = 200, seed: int = 0, noise: float = 0.05,
                   image_size: int = 64) -> tuple[list[StudyPair], list[StudyPair]]:
    pairs = generate_corpus(SyntheticSpec(n_studies=n_train + n_test, seed=seed, noise=noise,
                                          image_size=image_size))
    n = len(pairs)
    train_pairs, _, test_pairs = split_dataset(pairs, (n_train / n, 0.0, n_test / n), seed=seed)
    return train_pairs, test_pairs


def train_and_evaluate(config: ExperimentConfig, train_pairs: Sequence[StudyPair],
                       test_pairs: Sequence[StudyPair], vocab: Vocabulary | None = None,
                       ks: Sequence[int] = (1, 5, 10)) -> dict:
    vocab = vocab or build_vocabulary()
    train_corpus = EncodedCorpus(train_pairs, vocab, config)
    test_corpus = EncodedCorpus(test_pairs, vocab, config)
    state = init_state(config, steps_per_epoch(len(train_corpus), config.batch_size), vocab.pad_id)
    t0 = time.perf_counter()
    history = train(state, train_corpus)
    seconds = time.perf_counter() - t0
    index = embed_corpus(state.model, test_corpus)
    return {
        "recall": evaluate_recall(index, ks),
        "gap": index.gap(),
        "train_seconds": seconds,
        "final_loss": history[-1] if history else None,
        "counters": dict(state.model.counters),
        "state": state,
        "index": index,
        "test_corpus": test_corpus,
    }


def run_arm(arm: str | Arm, config: ExperimentConfig, train_pairs, test_pairs,
            vocab: Vocabulary | None = None, seed: int | None = None) -> dict:
    arm = ARMS[arm] if isinstance(arm, str) else arm
    cfg = arm.apply(config)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    log.info("arm %s (%s) seed %d", arm.name, arm.components, cfg.seed)
    out = train_and_evaluate(cfg, train_pairs, test_pairs, vocab)
    out.update(arm=arm.name, components=arm.components, input_mode=cfg.input_mode,
               align_strategy=cfg.align_strategy, seed=cfg.seed)
    return out
