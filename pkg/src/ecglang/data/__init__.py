from .corpus import (
    DEFAULT_CLASS_MIX,
    Corpus,
    CorpusError,
    filter_pairs,
    make_corpus,
    make_patient_pairs,
    read_corpus,
    write_corpus,
)
from .synth import (
    ABNORMALITIES,
    CODES,
    AbnormalitySpec,
    CompatibilityError,
    ECGRecord,
    Pair,
    default_vocab,
    synth_ecg,
    synth_report,
)
from .tokenizer import TextReport, Vocab, detokenize, normalize, tokenize
