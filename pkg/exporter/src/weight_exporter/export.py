"""Extract sequence-averaged attention maps from a causal LM into ATNW dumps."""

from __future__ import annotations

import gzip
import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from weight_exporter.dumpfmt import FORMAT_VERSION, write_manifest, write_matrix


class CapabilityError(RuntimeError):
    """The model cannot produce attention maps."""


@dataclass(frozen=True)
class ExportJob:
    """One export: which model, which corpus slice, where to write.

    `model` is a model-hub id or a local checkpoint directory. The corpus
    is plain text (one document per line) or jsonl with a "text" or
    pre-tokenized "tokens" field; ".gz" variants are transparent.
    """

    model: str
    corpus: str
    sequences: int
    max_len: int
    out_dir: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sequences < 1:
            raise ValueError("sequences must be at least 1")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")


def _open_corpus(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def _iter_documents(path: Path):
    """Yield ("text", str) or ("tokens", list[int]) records from the corpus."""
    jsonl = path.name.endswith(".jsonl") or path.name.endswith(".jsonl.gz")
    with _open_corpus(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if jsonl:
                doc = json.loads(line)
                if "tokens" in doc:
                    yield "tokens", [int(t) for t in doc["tokens"]]
                elif "text" in doc:
                    yield "text", doc["text"]
                else:
                    raise ValueError(f"{path}: jsonl record lacks 'text' and 'tokens'")
            else:
                yield "text", line


def _load_model(model_id: str):
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(model_id, attn_implementation="eager")
    model.eval()
    return model


def _load_tokenizer(model_id: str):
    from transformers import AutoTokenizer

    return AutoTokenizer.from_pretrained(model_id)


def collect_token_sequences(job: ExportJob, vocab_size: int) -> tuple[list[list[int]], int]:
    """Tokenized sequences of exactly max_len tokens plus the skipped count.

    Documents are deterministically shuffled by the job seed, truncated to
    max_len, and skipped (counted) when shorter. The tokenizer is loaded
    only if the corpus contains raw text records.
    """
    records = list(_iter_documents(Path(job.corpus)))
    rng = random.Random(job.seed)
    rng.shuffle(records)

    tokenizer = None
    chosen: list[list[int]] = []
    skipped_short = 0
    for kind, payload in records:
        if len(chosen) == job.sequences:
            break
        if kind == "text":
            if tokenizer is None:
                tokenizer = _load_tokenizer(job.model)
            ids = tokenizer(payload, add_special_tokens=False)["input_ids"]
        else:
            ids = payload
        if len(ids) < job.max_len:
            skipped_short += 1
            continue
        ids = ids[: job.max_len]
        bad = [t for t in ids if not (0 <= t < vocab_size)]
        if bad:
            raise ValueError(f"token id {bad[0]} outside the model vocabulary ({vocab_size})")
        chosen.append(list(ids))
    return chosen, skipped_short


def export_attention_dumps(job: ExportJob) -> Path:
    """Run the model over the corpus slice and write the averaged dump.

    Returns the manifest path. Runs in eval mode (attention dropout
    disabled), averages the per-head weight matrices over sequences, and
    writes with atomic file replacement. A sequence shortfall is reported
    in the manifest ("partial": true) rather than raised.
    """
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(job.model)
    vocab_size = int(model.config.vocab_size)

    sequences, skipped_short = collect_token_sequences(job, vocab_size)
    if not sequences:
        raise ValueError(
            f"corpus yielded no usable sequences of length >= {job.max_len} "
            f"({skipped_short} too short)"
        )

    totals: list[np.ndarray] | None = None
    layers = heads = None
    with torch.no_grad():
        for ids in sequences:
            input_ids = torch.tensor([ids], dtype=torch.long)
            outputs = model(input_ids=input_ids, output_attentions=True)
            attentions = getattr(outputs, "attentions", None)
            if not attentions:
                raise CapabilityError(
                    f"model {job.model!r} does not expose attention maps"
                )
            if totals is None:
                layers = len(attentions)
                heads = attentions[0].shape[1]
                totals = [
                    np.zeros((heads, job.max_len, job.max_len)) for _ in range(layers)
                ]
            for l, att in enumerate(attentions):
                totals[l] += att[0].to(torch.float64).numpy()

    files = []
    n_seq = len(sequences)
    for layer in range(layers):
        mean_layer = totals[layer] / n_seq
        for head in range(heads):
            w = mean_layer[head]
            w[np.triu_indices(job.max_len, k=1)] = 0.0
            name = f"layer{layer:02d}_head{head:02d}.atnw"
            write_matrix(out / name, w)
            files.append({"layer": layer, "head": head, "path": name})

    manifest = {
        "format-version": FORMAT_VERSION,
        "model": job.model,
        "n": job.max_len,
        "layers": layers,
        "heads": heads,
        "dtype": "f32",
        "layout": "dense-causal-rowmajor",
        "files": files,
        "sequences-averaged": n_seq,
        "skipped-short": skipped_short,
        "attention-dropout": "disabled-eval",
    }
    if n_seq < job.sequences:
        manifest["partial"] = True
    manifest_path = out / "manifest.json"
    write_manifest(manifest_path, manifest)
    return manifest_path
