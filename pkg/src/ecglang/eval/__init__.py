"""Evaluation metrics and downstream protocols."""

from .metrics import auroc, bleu, macro_auroc, recall_at_k, rouge_l
from .protocols import (
    LabelMapping,
    PromptTable,
    caption_scores,
    extract_features,
    generate_report,
    generate_reports,
    linear_probe,
    patient_recall_at_k,
    transfer_eval,
    zero_shot_classify,
    zero_shot_scores,
)
