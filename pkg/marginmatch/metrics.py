"""Per-pass evaluation. The only module that reads the hidden gold labels of the unlabeled pool."""

from typing import Optional

import numpy as np

from .data import DatasetBundle
from .network import ClassifierParams, forward
from .policy import DecisionBatch


class PassEvaluator:
    """Scores decisions against hidden gold labels and parameters against the test split."""

    def __init__(self, bundle: DatasetBundle):
        gold = bundle.unlabeled_gold
        self._gold = {int(e): int(y) for e, y in zip(gold.ids, gold.labels)}
        self._num_classes = bundle.num_classes
        self._unlabeled_count = len(bundle.unlabeled)
        self._test = bundle.test

    @property
    def unlabeled_count(self) -> int:
        return self._unlabeled_count

    def gold_for(self, example_ids) -> np.ndarray:
        """Gold labels for the given ids; -1 where an id has none."""
        return np.array([self._gold.get(int(e), -1) for e in example_ids], dtype=np.int64)

    def mislabeled_count(self, decisions: DecisionBatch) -> int:
        """Selected examples whose pseudo-label differs from the gold label."""
        selected = decisions.selected
        gold = self.gold_for(decisions.example_ids[selected])
        return int(np.count_nonzero(decisions.pseudo_labels[selected] != gold))

    def mask_rate(self, selected_count: int) -> float:
        return 1.0 - selected_count / self._unlabeled_count

    def impurity(self, decisions: DecisionBatch) -> Optional[float]:
        """Error rate among selected examples; None when nothing was selected."""
        selected_count = int(np.count_nonzero(decisions.selected))
        if selected_count == 0:
            return None
        return self.mislabeled_count(decisions) / selected_count

    def test_error(self, params: ClassifierParams) -> float:
        """Error on unaugmented test features, predicting argmax over the genuine classes."""
        if len(self._test) == 0:
            return 0.0
        logits = forward(params, self._test.features)
        predictions = logits[:, : self._num_classes].argmax(axis=1)
        return float(np.mean(predictions != self._test.labels))
