"""Tokenization, corpus files, and synthetic data generation.

The tokenizer is word-level over a closed vocabulary sized for the synthetic
task, with a byte-level escape so arbitrary JSONL corpora still round-trip
losslessly: an out-of-vocabulary word is emitted as <byte>, three decimal
digit tokens per UTF-8 byte, then a closing <byte>.  Empty words (runs of
spaces) map to <nul>, so ``detokenize(tokenize(s)) == s`` for every string.

Synthetic documents state facts of the form "the code for <adjective> <noun>
is <4 random digits> ."; each document carries one question about one of its
facts.  Entities are adjective-noun pairs assigned to train/valid/test by
pair index mod 20, so the splits never share a pair while every individual
word occurs in every split: test entities are unseen combinations of seen
words, not unseen words.  Pretraining documents use the reversed noun-first
ordering (disjoint pairs, full word coverage, none of the split codes), and
distractors come from a noun-noun grid whose entities overlap any question
in at most one word.
"""

import json
from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS, SEP, BYTE, NUL = 0, 1, 2, 3, 4, 5

SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<sep>", "<byte>", "<nul>"]
DIGIT_BASE = len(SPECIAL_TOKENS)  # ids 6..15 are the digits
TEMPLATE_WORDS = ["the", "code", "for", "is", "what", ".", "?"]

ADJECTIVES = [
    "amber", "brave", "calm", "dusty", "eager", "faint", "gentle", "hollow",
    "icy", "jolly", "keen", "lively", "mellow", "noble", "odd", "pale",
    "quiet", "rapid", "shy", "tidy", "upbeat", "vivid", "warm", "xenial",
    "young", "zesty",
]
NOUNS = [
    "anchor", "beacon", "cactus", "dagger", "ember", "falcon", "glacier",
    "harbor", "island", "jungle", "kettle", "lantern", "meadow", "needle",
    "orchid", "prism", "quarry", "river", "saddle", "tunnel", "urchin",
    "violet", "willow", "xylem", "yarrow", "zephyr",
]

# Adjective-first pairs 0..639 are split by residue mod 20 (interleaved so
# every word reaches every split); walking residue-major keeps any prefix of
# a split's pair list spread over the whole grid.
GRID_LIMIT = 640
SPLIT_RESIDUES = {"train": range(0, 9), "valid": range(9, 11), "test": range(11, 20)}
PRETRAIN_GRID = 676  # noun-first pairs, strided to cover both word lists
DISTRACTOR_GRID = 676  # noun-noun pairs, cycled

DOC_ID_BASE = {"train": 0, "valid": 100_000, "test": 200_000, "distractor": 300_000, "pretrain": 400_000}


class CorpusError(ValueError):
    pass


class Tokenizer:
    def __init__(self):
        words = SPECIAL_TOKENS + [str(i) for i in range(10)] + TEMPLATE_WORDS + ADJECTIVES + NOUNS
        self.vocab = words
        self.word_to_id = {w: i for i, w in enumerate(words)}

    @property
    def vocab_size(self):
        return len(self.vocab)

    def tokenize(self, text):
        ids = []
        for word in text.split(" "):
            if word == "":
                ids.append(NUL)
            elif word in self.word_to_id:
                ids.append(self.word_to_id[word])
            else:
                ids.append(BYTE)
                for b in word.encode("utf-8"):
                    for ch in f"{b:03d}":
                        ids.append(DIGIT_BASE + int(ch))
                ids.append(BYTE)
        return ids

    def detokenize(self, ids):
        words = []
        i = 0
        n = len(ids)
        while i < n:
            t = int(ids[i])
            if t in (PAD, BOS, EOS, SEP):
                i += 1
            elif t == NUL:
                words.append("")
                i += 1
            elif t == BYTE:
                i += 1
                digits = []
                while i < n and DIGIT_BASE <= int(ids[i]) < DIGIT_BASE + 10:
                    digits.append(int(ids[i]) - DIGIT_BASE)
                    i += 1
                if i < n and int(ids[i]) == BYTE:
                    i += 1
                raw = bytes(
                    100 * digits[j] + 10 * digits[j + 1] + digits[j + 2]
                    for j in range(0, len(digits) - len(digits) % 3, 3)
                )
                words.append(raw.decode("utf-8", errors="replace"))
            else:
                words.append(self.vocab[t])
                i += 1
        return " ".join(words)


@dataclass
class QARecord:
    doc_id: int
    document: str
    question: str
    answer: str
    split: str
    relevant: bool = True


def _pair_text(pair_index, order="adj_noun"):
    if order == "noun_noun":
        return f"{NOUNS[pair_index // len(NOUNS)]} {NOUNS[pair_index % len(NOUNS)]}"
    a = ADJECTIVES[pair_index // len(NOUNS)]
    b = NOUNS[pair_index % len(NOUNS)]
    return f"{b} {a}" if order == "noun_adj" else f"{a} {b}"


def _split_pairs(split):
    blocks = GRID_LIMIT // 20
    return [20 * b + r for r in SPLIT_RESIDUES[split] for b in range(blocks)]


def _fact(entity, code_digits):
    code = " ".join(str(d) for d in code_digits)
    return f"the code for {entity} is {code} .", code


def _make_records(rng, pair_indices, facts_per_doc, split, id_base, order, with_qa):
    records = []
    for i in range(0, len(pair_indices), facts_per_doc):
        doc_pairs = pair_indices[i : i + facts_per_doc]
        sentences, entities, codes = [], [], []
        for p in doc_pairs:
            entity = _pair_text(p, order)
            sentence, code = _fact(entity, rng.integers(0, 10, size=4))
            sentences.append(sentence)
            entities.append(entity)
            codes.append(code)
        document = " ".join(sentences)
        doc_id = id_base + i // facts_per_doc
        if with_qa:
            j = int(rng.integers(0, len(entities)))
            question = f"what is the code for {entities[j]} ?"
            records.append(QARecord(doc_id, document, question, codes[j], split, True))
        else:
            records.append(QARecord(doc_id, document, "", "", split, False))
    return records


def gen_synthetic(seed, n_docs, facts_per_doc=1, split="train"):
    """Deterministic fact corpus for one split; splits never share an entity."""
    if n_docs < 1:
        raise CorpusError("n_docs must be >= 1")
    if split not in SPLIT_RESIDUES:
        raise CorpusError(f"unknown split {split!r}")
    pool = _split_pairs(split)
    need = n_docs * facts_per_doc
    if need > len(pool):
        raise CorpusError(f"split {split} holds {len(pool)} entities, requested {need}")
    rng = np.random.default_rng([seed, list(SPLIT_RESIDUES).index(split)])
    return _make_records(rng, pool[:need], facts_per_doc, split, DOC_ID_BASE[split], "adj_noun", True)


def gen_pretrain(seed, n_docs, facts_per_doc=1):
    """Base-model pretraining corpus over the noun-first namespace.

    Pairs are strided across the full grid so every adjective and noun is
    seen, while the reversed word order keeps the pairs disjoint from every
    split: the frozen model learns the fact and question formats without ever
    seeing a single train/valid/test code.
    """
    if n_docs < 1:
        raise CorpusError("n_docs must be >= 1")
    need = n_docs * facts_per_doc
    if need > PRETRAIN_GRID:
        raise CorpusError(f"pretrain namespace holds {PRETRAIN_GRID} entities, requested {need}")
    rng = np.random.default_rng([seed, 100])
    pairs = [(i * PRETRAIN_GRID) // need for i in range(need)]
    return _make_records(rng, pairs, facts_per_doc, "train", DOC_ID_BASE["pretrain"], "noun_adj", True)


def gen_irrelevant(seed, n):
    """Distractor documents (no QA) over the noun-noun grid.

    A distractor entity shares at most one word with any question, so these
    are topically similar but never near-duplicates of a relevant fact.
    """
    if n < 1:
        raise CorpusError("n must be >= 1")
    rng = np.random.default_rng([seed, 200])
    pairs = [i % DISTRACTOR_GRID for i in range(n)]
    return _make_records(rng, pairs, 1, "test", DOC_ID_BASE["distractor"], "noun_noun", False)


def load_corpus(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {lineno}: invalid record ({e.msg})") from None
            for key in ("doc_id", "document", "split"):
                if key not in obj:
                    raise CorpusError(f"line {lineno}: missing field {key!r}")
            if obj["split"] not in SPLIT_RESIDUES:
                raise CorpusError(f"line {lineno}: unknown split {obj['split']!r}")
            has_qa = "question" in obj
            if has_qa and "answer" not in obj:
                raise CorpusError(f"line {lineno}: missing field 'answer'")
            records.append(
                QARecord(
                    doc_id=int(obj["doc_id"]),
                    document=str(obj["document"]),
                    question=str(obj.get("question", "")),
                    answer=str(obj.get("answer", "")),
                    split=str(obj["split"]),
                    relevant=bool(has_qa),
                )
            )
    return records


def save_corpus(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {"doc_id": r.doc_id, "document": r.document, "split": r.split}
            if r.relevant:
                obj["question"] = r.question
                obj["answer"] = r.answer
            fh.write(json.dumps(obj) + "\n")


# Sequence renderings shared by pretraining, the learning phase, and answering.


def doc_token_ids(tok, document):
    return [BOS] + tok.tokenize(document) + [EOS]


def qa_token_ids(tok, question, answer):
    """Full supervised sequence plus a mask marking answer positions.

    mask[i] is true for the answer tokens and the closing <eos>, the positions
    the task loss scores; the question and separator are context only.
    """
    q = tok.tokenize(question)
    a = tok.tokenize(answer)
    ids = [BOS] + q + [SEP] + a + [EOS]
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(q) + 2 :] = True
    return ids, mask


def prompt_token_ids(tok, question):
    return [BOS] + tok.tokenize(question) + [SEP]
