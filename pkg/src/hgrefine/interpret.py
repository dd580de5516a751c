"""Prompt construction from learned attention and refined-graph typicality, plus optional dispatch."""
import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SECTION_HEADERS = ("Instruction:", "Context:", "Notes:")


# -- typicality ----------------------------------------------------------


@dataclass(frozen=True)
class TypicalityScore:
    user: int
    same: int
    total: int
    ratio: float
    typical: bool

    def to_dict(self):
        return asdict(self)


def compute_typicality(user, refined, labels, min_peers=3, reference_label=None):
    """Share of ``user``'s refined-graph neighbours that carry the same label.

    ``labels`` holds known (training) labels with -1 for unlabeled users:
    unlabeled neighbours count towards the total only. The user's own label
    comes from ``labels`` unless ``reference_label`` (e.g. a prediction) is given.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 <= user < refined.n:
        raise KeyError(f"user {user} not in refined graph of {refined.n} users")
    pairs = np.asarray(refined.pairs, dtype=np.int64).reshape(-1, 2)
    nbrs = np.concatenate([pairs[pairs[:, 0] == user, 1], pairs[pairs[:, 1] == user, 0]])
    ref = labels[user] if reference_label is None else int(reference_label)
    total = int(len(nbrs))
    same = int(np.sum(labels[nbrs] == ref)) if ref >= 0 else 0
    ratio = same / total if total else 0.0
    return TypicalityScore(int(user), same, total, ratio, bool(total and same >= min_peers))


# -- templates -----------------------------------------------------------

_REQUIRED = ("instruction", "notes", "important_foods", "important_habits", "remaining", "ingredients",
             "typical", "atypical", "isolated", "label_names")


def load_template(path=None):
    """Load a prompt template; ``None`` gives the shipped default."""
    if path is None:
        text = resources.files("hgrefine").joinpath("templates/default.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return validate_template(json.loads(text))


def validate_template(t):
    missing = [k for k in _REQUIRED if k not in t]
    if missing:
        raise ValueError(f"template missing keys {missing}")
    for k in ("instruction", "notes"):
        if not str(t[k]).strip():
            raise ValueError(f"template section {k!r} is empty")
    if len(t["label_names"]) != 2:
        raise ValueError("template label_names must have two entries")
    return t


# -- rendering -----------------------------------------------------------


@dataclass(frozen=True)
class PromptBundle:
    user: str
    instruction: str
    context: str
    notes: str
    prediction: int = None
    probability: float = None

    def text(self):
        parts = []
        for head, body in zip(SECTION_HEADERS, (self.instruction, self.context, self.notes)):
            parts.append(f"{head}\n{body}\n")
        return "\n".join(parts)

    def to_dict(self):
        return asdict(self)


def rank_ingredients(food, attention, order=None):
    """Ingredients of ``food`` by descending score; ties by ascending node index.

    ``attention`` is an :class:`AttentionRecord` or a list of (ingredient id, score).
    ``order`` maps id -> node index for the tie rule (default: the id itself).
    """
    items = attention.ingredients.get(food, []) if hasattr(attention, "ingredients") else list(attention)
    key = (lambda i: order[i]) if order is not None else (lambda i: i)
    return sorted(((i, float(s)) for i, s in items), key=lambda e: (-e[1], key(e[0])))


def _name(names, node_type, node_id):
    if names is None:
        return str(node_id)
    return names.get(node_type, {}).get(node_id, str(node_id))


def _ranked_lines(t, header, items, names, node_type, record=None):
    lines = [header]
    for rank, (nid, _, _, score) in enumerate(items, 1):
        line = f"{rank}. {_name(names, node_type, nid)} (attention {score:.4f})"
        if record is not None:
            ings = rank_ingredients(nid, record)[: int(t.get("ingredient_limit", 3))]
            if ings:
                line += "; " + t["ingredients"].format(
                    items=", ".join(_name(names, "ingredient", i) for i, _ in ings))
        lines.append(line)
    return lines


def _remaining(t, kind, items, names, node_type):
    if not items:
        return None
    limit = int(t.get("remaining_limit", 20))
    shown = [_name(names, node_type, nid) for nid, _, _, _ in items[:limit]]
    text = ", ".join(shown)
    if len(items) > limit:
        text += f" and {len(items) - limit} more"
    return t["remaining"].format(kind=kind, items=text)


def render_prompt(user, record, typ, template=None, top_k=10, prediction=None, probability=None,
                  demographics=None, names=None):
    """Assemble the three-section prompt for one user. Pure: same inputs, same bytes.

    ``names``: optional {node type: {id: display name}}.
    """
    if record is None:
        raise ValueError(f"no attention record for user {user!r}")
    t = validate_template(template if template is not None else load_template())
    ctx = [f"User: {user}"]
    if demographics:
        ctx.append("Profile: " + "; ".join(f"{k}: {demographics[k]}" for k in sorted(demographics)))
    if prediction is not None:
        p = "" if probability is None else f" (probability {probability:.3f})"
        ctx.append(f"Model assessment: {t['label_names'][int(prediction)]}{p}.")
    foods, habits = record.top("food", top_k), record.top("habit", top_k)
    if foods:
        ctx += _ranked_lines(t, t["important_foods"], foods, names, "food", record)
    if habits:
        ctx += _ranked_lines(t, t["important_habits"], habits, names, "habit")
    for kind, node_type in (("foods", "food"), ("habits", "habit")):
        line = _remaining(t, kind, record.rest(node_type, top_k), names, node_type)
        if line:
            ctx.append(line)
    if typ is not None:
        if typ.total == 0:
            ctx.append(t["isolated"])
        else:
            key = "typical" if typ.typical else "atypical"
            ctx.append(t[key].format(total=typ.total, same=typ.same, ratio=typ.ratio))
    notes = t["notes"].format(max_words=t.get("max_words", 200))
    return PromptBundle(str(user), t["instruction"].strip(), "\n".join(ctx), notes.strip(), prediction,
                        None if probability is None else float(probability))


def prompt_items(bundle_record, top_k=10):
    """(type, id) of every item a rendered prompt mentions, for cross-checking against the graph."""
    rec = bundle_record
    out = []
    for node_type in ("food", "habit"):
        items = [it for it in rec.items if it[1] == node_type]
        out += [(node_type, it[0]) for it in items]
    for food, _, _, _ in rec.top("food", top_k):
        out += [("ingredient", i) for i, _ in rec.ingredients.get(food, [])]
    return out


def _safe_name(user):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in str(user))


def write_prompts(bundles, run_dir):
    """Write ``prompts/<user>.txt`` per bundle plus ``prompts/manifest.json``; returns the manifest."""
    out = Path(run_dir) / "prompts"
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for b in bundles:
        name = f"{_safe_name(b.user)}.txt"
        data = b.text().encode("utf-8")
        (out / name).write_bytes(data)
        manifest.append({"user": b.user, "file": name, "sha256": hashlib.sha256(data).hexdigest(),
                         "prediction": b.prediction, "probability": b.probability})
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"count": len(manifest), "prompts": manifest}, fh, indent=1)
    return manifest


# -- dispatch ------------------------------------------------------------


class DispatchError(RuntimeError):
    def __init__(self, msg, attempts):
        super().__init__(msg)
        self.attempts = attempts   # [(unix time, error text)]


@dataclass
class DispatchResult:
    user: str
    prompt_path: str
    response_path: str = None
    status: int = None
    malformed: bool = False
    attempts: int = 0


def _transient(code):
    return code is None or code >= 500 or code in (408, 429)


def dispatch(bundle, endpoint, out_dir, opener=None, sleep=time.sleep):
    """Write the prompt file and, if an endpoint URL is configured, POST it.

    ``endpoint`` keys: ``url``, ``model``, ``auth_env`` (name of the token's
    environment variable), ``max_concurrent``, optional ``retries`` (3),
    ``backoff`` seconds (0.5, doubled per attempt) and ``timeout`` (30).
    The raw response body is stored beside the prompt.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = _safe_name(bundle.user)
    text = bundle.text()
    prompt_path = out / f"{stem}.txt"
    prompt_path.write_bytes(text.encode("utf-8"))
    res = DispatchResult(bundle.user, str(prompt_path))
    if not endpoint or not endpoint.get("url"):
        return res
    opener = opener or urllib.request.urlopen
    body = json.dumps({"model": endpoint.get("model", ""), "prompt": text}).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(endpoint.get("auth_env") or "", "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    retries = int(endpoint.get("retries", 3))
    backoff = float(endpoint.get("backoff", 0.5))
    attempts = []
    for k in range(retries):
        req = urllib.request.Request(endpoint["url"], data=body, headers=headers, method="POST")
        try:
            with opener(req, timeout=float(endpoint.get("timeout", 30))) as resp:
                raw = resp.read()
                status = getattr(resp, "status", 200)
            res.status, res.attempts = status, k + 1
            resp_path = out / f"{stem}.response.txt"
            resp_path.write_bytes(raw)
            res.response_path = str(resp_path)
            try:
                json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                res.malformed = True
                log.warning("response for %s is not valid JSON; stored raw", bundle.user)
            return res
        except urllib.error.HTTPError as e:
            code, err = e.code, f"HTTP {e.code}"
        except (urllib.error.URLError, OSError) as e:
            code, err = None, str(e)
        attempts.append((time.time(), err))
        log.warning("dispatch %s attempt %d/%d failed at %.3f: %s", bundle.user, k + 1, retries, attempts[-1][0], err)
        if not _transient(code):
            break
        if k + 1 < retries:
            sleep(backoff * 2 ** k)
    raise DispatchError(f"dispatch for {bundle.user} failed after {len(attempts)} attempts: {attempts[-1][1]}",
                        attempts)


def dispatch_all(bundles, endpoint, out_dir, opener=None):
    """Dispatch many bundles with at most ``endpoint['max_concurrent']`` requests in flight."""
    workers = max(1, int((endpoint or {}).get("max_concurrent", 1)))
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda b: dispatch(b, endpoint, out_dir, opener), bundles))
