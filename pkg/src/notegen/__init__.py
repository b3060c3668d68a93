"""Conditional language modeling of clinical notes over EHR-shaped data.

The pipeline: ingest or synthesize a patient cohort (``ehr``), extract and
serialize note contexts with the marker grammar (``context``), tokenize with a
byte-level subword vocabulary (``tokenizer``), build patient-disjoint datasets
(``dataset``), train miniature transformers with exact hand-written gradients
(``model``, ``training``), decode and score notes (``decoding``), evaluate
(``metrics``), and drive error detection / auto-complete (``assist``) through
a CLI (``cli``) and an HTTP service (``service``).
"""

__version__ = "0.1.0"
