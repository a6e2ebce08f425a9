"""Synthetic multi-step modular-arithmetic tasks with criticality labels.

A sample is a straight-line program: a few constant assignments followed by
binary-op derivations over earlier variables, all modulo a fixed modulus.
The dependency DAG gives ground-truth per-step criticality: assignments have
in-degree 0 (non-critical, c=0), derivations integrate earlier results
(critical, c=1).

Token layout of a full sequence:  question ... <r> | steps ... | <a> digits <eoa>
The question restates every statement ("c = a + b mod 100"); each reasoning
step renders a statement with operand values substituted and its computed
value ("c = a + b = 07 + 42 = 49"), which keeps the arithmetic local to the
step. Values are zero-padded to two digits so every step has a fixed shape.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

PAD, R_MARK, A_MARK, EOA = "<pad>", "<r>", "<a>", "<eoa>"

_SPECIALS = [PAD, R_MARK, A_MARK, EOA, ";", "=", "+", "-", "*", "mod"]
_DIGITS = [str(i) for i in range(10)]
_VARS = list("abcdefghijkl")

VOCAB = _SPECIALS + _DIGITS + _VARS
TOKEN_TO_ID = {t: i for i, t in enumerate(VOCAB)}
ID_TO_TOKEN = {i: t for i, t in enumerate(VOCAB)}

PAD_ID = TOKEN_TO_ID[PAD]
R_MARK_ID = TOKEN_TO_ID[R_MARK]
A_MARK_ID = TOKEN_TO_ID[A_MARK]
EOA_ID = TOKEN_TO_ID[EOA]
DIGIT_IDS = [TOKEN_TO_ID[d] for d in _DIGITS]


class TokenizeError(ValueError):
    pass


def tokenize(text: str):
    """Whitespace-split tokens; digit words split into one token per digit."""
    ids = []
    for word in text.split():
        if word.isdigit():
            ids.extend(TOKEN_TO_ID[ch] for ch in word)
        elif word in TOKEN_TO_ID:
            ids.append(TOKEN_TO_ID[word])
        else:
            raise TokenizeError(f"out-of-vocabulary symbol: {word!r}")
    return ids


def detokenize(ids):
    """Inverse of tokenize on canonical text: adjacent digits re-merge."""
    words = []
    for i in ids:
        tok = ID_TO_TOKEN[int(i)]
        if tok in _DIGITS and words and words[-1].isdigit():
            words[-1] += tok
        else:
            words.append(tok)
    return " ".join(words)


@dataclass
class TaskConfig:
    n_assign: tuple = (2, 4)     # inclusive range of constant assignments
    n_combine: tuple = (1, 3)    # inclusive range of derivations
    modulus: int = 100
    ops: tuple = ("+", "-", "*")
    seed: int = 0

    def __post_init__(self):
        if self.n_assign[0] < 1 or self.n_combine[0] < 1:
            raise ValueError("need at least one assignment and one derivation")
        if self.n_assign[1] + self.n_combine[1] > len(_VARS):
            raise ValueError("not enough variable names")

    def to_dict(self):
        return {"n_assign": list(self.n_assign), "n_combine": list(self.n_combine),
                "modulus": self.modulus, "ops": list(self.ops), "seed": self.seed}

    @staticmethod
    def from_dict(d):
        return TaskConfig(n_assign=tuple(d["n_assign"]), n_combine=tuple(d["n_combine"]),
                          modulus=d["modulus"], ops=tuple(d["ops"]), seed=d["seed"])


@dataclass
class Sample:
    question_tokens: list          # ends with <r>
    steps: list                    # [(token list, criticality bit)]
    answer_tokens: list            # [<a>, digit, digit, <eoa>]
    answer_value: int
    index: int

    @property
    def t_q(self):
        return len(self.question_tokens)

    @property
    def t_r(self):
        return sum(len(s) for s, _ in self.steps)

    @property
    def t_a(self):
        return len(self.answer_tokens)

    def reasoning_tokens(self):
        return [t for s, _ in self.steps for t in s]

    def token_criticality(self):
        """Per reasoning token: the containing step's criticality bit."""
        return [c for s, c in self.steps for _ in s]

    def full_tokens(self):
        return self.question_tokens + self.reasoning_tokens() + self.answer_tokens

    def answer_digit_tokens(self):
        return self.answer_tokens[1:-1]


def _fmt(v):
    return f"{v:02d}"


def label_criticality(n_nodes, edges):
    """c=0 for in-degree-0 nodes, c=1 otherwise. Raises on a cycle.

    edges: iterable of (src, dst) with src feeding dst."""
    indeg = [0] * n_nodes
    adj = [[] for _ in range(n_nodes)]
    for s, t in edges:
        indeg[t] += 1
        adj[s].append(t)
    labels = [0 if d == 0 else 1 for d in indeg]
    # Kahn's algorithm purely to detect cycles
    work = indeg[:]
    queue = [i for i in range(n_nodes) if work[i] == 0]
    seen = 0
    while queue:
        u = queue.pop()
        seen += 1
        for v in adj[u]:
            work[v] -= 1
            if work[v] == 0:
                queue.append(v)
    if seen != n_nodes:
        raise ValueError("dependency graph contains a cycle")
    return labels


def generate_sample(cfg: TaskConfig, index: int) -> Sample:
    """Deterministic sample for (cfg, index); identical inputs give identical output."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,)))
    n_a = int(rng.integers(cfg.n_assign[0], cfg.n_assign[1] + 1))
    n_c = int(rng.integers(cfg.n_combine[0], cfg.n_combine[1] + 1))
    m = cfg.modulus

    names, values = [], []
    stmts = []                      # question statements as text
    edges = []                      # DAG edges (operand node -> combine node)
    for i in range(n_a):
        name = _VARS[i]
        val = int(rng.integers(0, m))
        names.append(name)
        values.append(val)
        stmts.append(f"{name} = {_fmt(val)}")
    for j in range(n_c):
        node = n_a + j
        name = _VARS[node]
        op = str(rng.choice(list(cfg.ops)))
        ia, ib = int(rng.integers(0, node)), int(rng.integers(0, node))
        va, vb = values[ia], values[ib]
        val = {"+": va + vb, "-": va - vb, "*": va * vb}[op] % m
        names.append(name)
        values.append(val)
        stmts.append(f"{name} = {names[ia]} {op} {names[ib]} mod {m}")
        edges.append((ia, node))
        edges.append((ib, node))

    labels = label_criticality(n_a + n_c, edges)

    q_text = " ; ".join(stmts) + " ;"
    question_tokens = tokenize(q_text) + [R_MARK_ID]

    steps = []
    for i in range(n_a):
        steps.append((tokenize(f"{names[i]} = {_fmt(values[i])} ;"), labels[i]))
    for j in range(n_c):
        node = n_a + j
        stmt = stmts[node]                      # "c = a + b mod 100"
        lhs, rhs = stmt.split(" = ")
        var_a, op, var_b = rhs.split()[0:3]
        va = values[names.index(var_a)]
        vb = values[names.index(var_b)]
        text = f"{lhs} = {var_a} {op} {var_b} = {_fmt(va)} {op} {_fmt(vb)} = {_fmt(values[node])} ;"
        steps.append((tokenize(text), labels[node]))

    ans = values[-1]
    answer_tokens = [A_MARK_ID] + tokenize(_fmt(ans)) + [EOA_ID]
    return Sample(question_tokens, steps, answer_tokens, ans, index)


def interpret_question(tokens):
    """Execute the program in a question token sequence; returns the final value.

    Independent of the generator: parses statements and evaluates them. Used
    to verify that every generated sample's answer is recomputable."""
    text = detokenize([t for t in tokens if t != R_MARK_ID])
    env = {}
    last = None
    for stmt in text.split(";"):
        stmt = stmt.strip()
        if not stmt:
            continue
        lhs, rhs = [s.strip() for s in stmt.split("=", 1)]
        parts = rhs.split()
        if len(parts) == 1:
            env[lhs] = int(parts[0])
        else:
            va, op, vb = env[parts[0]], parts[1], env[parts[2]]
            if parts[3] != "mod":
                raise ValueError(f"malformed statement: {stmt!r}")
            m = int(parts[4])
            env[lhs] = {"+": va + vb, "-": va - vb, "*": va * vb}[op] % m
        last = lhs
    return env[last]


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def sample_to_json(s: Sample):
    return {"q": s.question_tokens,
            "steps": [{"toks": toks, "c": c} for toks, c in s.steps],
            "a": s.answer_tokens}


def sample_from_json(d, index=-1):
    steps = [(rec["toks"], rec["c"]) for rec in d["steps"]]
    ans_digits = detokenize(d["a"][1:-1])
    return Sample(d["q"], steps, d["a"], int(ans_digits), index)


def write_dataset(path, cfg: TaskConfig, indices):
    """JSON Lines of samples plus a sidecar .meta.json with config + vocab."""
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for i in indices:
            f.write(json.dumps(sample_to_json(generate_sample(cfg, i))) + "\n")
    os.replace(tmp, path)
    meta = {"task": cfg.to_dict(), "vocab": VOCAB,
            "indices": {"start": int(indices[0]), "stop": int(indices[-1]) + 1}}
    mpath = meta_path(path)
    with open(mpath + ".tmp", "w") as f:
        json.dump(meta, f, indent=2)
    os.replace(mpath + ".tmp", mpath)


def meta_path(path):
    return path + ".meta.json"


def read_dataset(path):
    samples = []
    with open(path) as f:
        for i, line in enumerate(f):
            samples.append(sample_from_json(json.loads(line), i))
    return samples
