"""
Classification error and summary metrics.
"""

import numpy as np
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from sgmq.errors import DataFormatError
from sgmq.stages.types import EvaluationReport
from sgmq.tools.idx_data_tool import NUM_CLASSES, Dataset
from sgmq.tools.integer_infer_tool import integer_predict
from sgmq.tools.model_codec_tool import QuantizedModel
from sgmq.tools.nn_engine_tool import Network, predict_logits

EVAL_BATCH = 250


def predict(model, dataset: Dataset) -> np.ndarray:
    """Argmax predictions of a float Network or an exported QuantizedModel."""
    if len(dataset) == 0:
        raise DataFormatError(f"cannot evaluate on an empty '{dataset.split_tag}' split")
    x = dataset.inputs()
    if isinstance(model, QuantizedModel):
        logits = integer_predict(model, x, batch_size=EVAL_BATCH)
    elif isinstance(model, Network):
        logits = predict_logits(model, x, batch_size=EVAL_BATCH)
    else:
        raise TypeError(f"cannot evaluate a {type(model).__name__}")
    return logits.argmax(axis=1)


def evaluate(model, dataset: Dataset) -> float:
    """Fraction of misclassified samples."""
    return float(1.0 - accuracy_score(dataset.labels, predict(model, dataset)))


def evaluation_report(model, dataset: Dataset) -> EvaluationReport:
    pred = predict(model, dataset)
    accuracy = float(accuracy_score(dataset.labels, pred))
    precision, recall, f1, _ = precision_recall_fscore_support(
        dataset.labels, pred, labels=list(range(NUM_CLASSES)), average="macro", zero_division=0
    )
    return EvaluationReport(
        samples=len(dataset),
        error_rate=1.0 - accuracy,
        accuracy=accuracy,
        precision_macro=float(precision),
        recall_macro=float(recall),
        f1_macro=float(f1),
    )
