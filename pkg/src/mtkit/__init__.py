"""mtkit: a desk-scale machine translation workbench.

Word-level LSTM encoder-decoder with global attention, trained by plain SGD
with validation-perplexity-driven learning-rate halving; attention-argmax
unknown-word replacement; corpus BLEU / WER / length-binned evaluation with
figure rendering; and a blinded adequacy/fluency human-rating service.
"""

__version__ = "0.1.0"
