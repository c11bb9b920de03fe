"""Document data model, manifest IO, encoding, and the synthetic corpus generator.

A corpus directory holds ``manifest.jsonl`` (one document object per line)
plus ``pages/<docid>_<pageidx>.png`` rasters. Token entries are
``[token_id, x1, y1, x2, y2, page_index]`` with an optional trailing label.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .config import (
    CLS_ID,
    FIRST_REGULAR_ID,
    IGNORE_INDEX,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    ModelConfig,
    SyntheticSpec,
)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
PAGES_DIR = "pages"


class CorpusError(ValueError):
    """Structurally invalid document or corpus input."""


class ManifestError(CorpusError):
    """Malformed manifest file; message names the offending line or path."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in resized-page pixel coordinates."""

    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def h(self) -> int:
        return self.y2 - self.y1

    @property
    def w(self) -> int:
        return self.x2 - self.x1

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x1 <= self.x2 <= width):
            raise CorpusError(f"bbox x range {self.x1}..{self.x2} outside [0, {width}]")
        if not (0 <= self.y1 <= self.y2 <= height):
            raise CorpusError(f"bbox y range {self.y1}..{self.y2} outside [0, {height}]")


@dataclass(frozen=True)
class TokenRecord:
    token_id: int
    bbox: BBox
    page_index: int
    label: Optional[int] = None


@dataclass
class PageRecord:
    """One page raster; the image may be loaded lazily from disk."""

    page_index: int
    _image: Optional[np.ndarray] = None
    _loader: Optional[Callable[[], np.ndarray]] = None

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            if self._loader is None:
                raise CorpusError(f"page {self.page_index} has no image source")
            self._image = self._loader()
        return self._image


@dataclass
class Document:
    id: str
    pages: list
    tokens: list
    category: Optional[int] = None

    def validate(self) -> None:
        if not self.pages:
            raise CorpusError(f"document {self.id!r} has zero pages")
        page_indices = [p.page_index for p in self.pages]
        if page_indices != list(range(len(self.pages))):
            raise CorpusError(f"document {self.id!r} pages are not consecutively indexed")
        last = -1
        for tok in self.tokens:
            if tok.page_index >= len(self.pages) or tok.page_index < 0:
                raise CorpusError(
                    f"document {self.id!r}: token references missing page {tok.page_index}"
                )
            if tok.page_index < last:
                raise CorpusError(f"document {self.id!r}: tokens not grouped by page")
            last = tok.page_index


@dataclass
class EncodedDocument:
    """Parallel integer sequences ready for the model; length S, unpadded."""

    doc_id: str
    input_ids: np.ndarray
    x1s: np.ndarray
    y1s: np.ndarray
    x2s: np.ndarray
    y2s: np.ndarray
    hs: np.ndarray
    ws: np.ndarray
    page_ids: np.ndarray
    attention_mask: np.ndarray
    global_mask: np.ndarray
    page_images: list = field(default_factory=list)
    mvlm_labels: Optional[np.ndarray] = None
    token_labels: Optional[np.ndarray] = None
    category: Optional[int] = None

    @property
    def length(self) -> int:
        return len(self.input_ids)

    def sequence_fields(self):
        return (
            "input_ids", "x1s", "y1s", "x2s", "y2s", "hs", "ws",
            "page_ids", "attention_mask", "global_mask",
        )


def encode_document(doc: Document, cfg: ModelConfig) -> EncodedDocument:
    """Encode a document as [CLS, page0 tokens, SEP, page1 tokens, SEP, ...].

    Pages beyond ``cfg.max_pages`` are dropped first, then tokens beyond
    ``cfg.tokens_per_page`` within each retained page. CLS and SEP carry the
    full-page box; CLS sits on page 0. Coordinates clamp into their embedding
    table ranges.
    """
    doc.validate()
    u, v = cfg.page_width, cfg.page_height
    pages = doc.pages[: cfg.max_pages]
    n_pages = len(pages)

    per_page: list = [[] for _ in range(n_pages)]
    for tok in doc.tokens:
        if tok.page_index < n_pages and len(per_page[tok.page_index]) < cfg.tokens_per_page:
            per_page[tok.page_index].append(tok)

    ids = [CLS_ID]
    boxes = [(0, 0, u, v)]
    page_ids = [0]
    labels = [IGNORE_INDEX]
    any_label = False
    for p in range(n_pages):
        for tok in per_page[p]:
            if not (0 <= tok.token_id < cfg.vocab_size):
                raise CorpusError(
                    f"document {doc.id!r}: token id {tok.token_id} outside vocab"
                )
            b = tok.bbox
            x1 = min(max(b.x1, 0), u)
            x2 = min(max(b.x2, 0), u)
            y1 = min(max(b.y1, 0), v)
            y2 = min(max(b.y2, 0), v)
            ids.append(tok.token_id)
            boxes.append((x1, y1, x2, y2))
            page_ids.append(p)
            if tok.label is not None:
                any_label = True
                labels.append(tok.label)
            else:
                labels.append(IGNORE_INDEX)
        ids.append(SEP_ID)
        boxes.append((0, 0, u, v))
        page_ids.append(p)
        labels.append(IGNORE_INDEX)

    boxes_arr = np.asarray(boxes, dtype=np.int64)
    x1s, y1s, x2s, y2s = boxes_arr.T
    hs = np.clip(y2s - y1s, 0, v)
    ws = np.clip(x2s - x1s, 0, u)
    seq_len = len(ids)
    global_mask = np.zeros(seq_len, dtype=np.int64)
    global_mask[0] = 1

    return EncodedDocument(
        doc_id=doc.id,
        input_ids=np.asarray(ids, dtype=np.int64),
        x1s=x1s.copy(), y1s=y1s.copy(), x2s=x2s.copy(), y2s=y2s.copy(),
        hs=hs, ws=ws,
        page_ids=np.asarray(page_ids, dtype=np.int64),
        attention_mask=np.ones(seq_len, dtype=np.int64),
        global_mask=global_mask,
        page_images=[p.image for p in pages],
        token_labels=np.asarray(labels, dtype=np.int64) if any_label else None,
        category=doc.category,
    )


def _load_png(path: str, expected_size=None) -> np.ndarray:
    if not os.path.exists(path):
        raise ManifestError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    arr = np.transpose(arr, (2, 0, 1))  # (3, v, u)
    if expected_size is not None:
        u, v = expected_size
        if arr.shape != (3, v, u):
            raise ManifestError(
                f"image {path} has shape {arr.shape}, expected (3, {v}, {u})"
            )
    return arr


def load_manifest(path: str, expected_size=None, eager: bool = True) -> list:
    """Load documents from a JSON-Lines manifest, in file order.

    ``expected_size`` is an optional (width, height) check on page rasters;
    with ``eager=False`` images are decoded on first access.
    """
    base = os.path.dirname(os.path.abspath(path))
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc})") from exc
            for key in ("id", "pages", "tokens"):
                if key not in obj:
                    raise ManifestError(f"line {lineno}: missing {key!r} key")
            pages = []
            for idx, rel in enumerate(obj["pages"]):
                img_path = os.path.join(base, rel)
                if eager:
                    pages.append(PageRecord(idx, _image=_load_png(img_path, expected_size)))
                else:
                    if not os.path.exists(img_path):
                        raise ManifestError(f"missing image file: {img_path}")
                    pages.append(PageRecord(
                        idx,
                        _loader=lambda p=img_path: _load_png(p, expected_size),
                    ))
            tokens = []
            for entry in obj["tokens"]:
                if len(entry) not in (6, 7):
                    raise ManifestError(f"line {lineno}: bad token entry {entry!r}")
                tid, x1, y1, x2, y2, pidx = entry[:6]
                label = entry[6] if len(entry) == 7 else None
                tokens.append(TokenRecord(tid, BBox(x1, y1, x2, y2), pidx, label))
            docs.append(Document(
                id=obj["id"], pages=pages, tokens=tokens,
                category=obj.get("category"),
            ))
    return docs


def write_corpus(docs: list, out_dir: str) -> str:
    """Write documents as manifest + PNG pages; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, PAGES_DIR), exist_ok=True)
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for doc in docs:
            page_paths = []
            for page in doc.pages:
                rel = f"{PAGES_DIR}/{doc.id}_{page.page_index}.png"
                img = np.clip(np.round(page.image * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(np.transpose(img, (1, 2, 0))).save(
                    os.path.join(out_dir, rel)
                )
                page_paths.append(rel)
            tokens = []
            for tok in doc.tokens:
                entry = [tok.token_id, tok.bbox.x1, tok.bbox.y1,
                         tok.bbox.x2, tok.bbox.y2, tok.page_index]
                if tok.label is not None:
                    entry.append(tok.label)
                tokens.append(entry)
            obj = {
                "schema": MANIFEST_SCHEMA_VERSION,
                "id": doc.id,
                "category": doc.category,
                "pages": page_paths,
                "tokens": tokens,
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
    return manifest_path


def category_vocab_slices(spec: SyntheticSpec):
    """Partition the regular vocabulary into marked + per-category slices.

    Returns (marked_range, [category_range, ...]) as half-open (lo, hi) pairs.
    """
    regular = spec.vocab_size - FIRST_REGULAR_ID
    marked = int(regular * spec.marked_vocab_frac)
    per_cat = (regular - marked) // spec.num_categories
    cat_ranges = []
    lo = FIRST_REGULAR_ID
    for _ in range(spec.num_categories):
        cat_ranges.append((lo, lo + per_cat))
        lo += per_cat
    marked_range = (spec.vocab_size - marked, spec.vocab_size)
    return marked_range, cat_ranges


def glyph_region(page_index: int, spec: SyntheticSpec):
    """Fixed pixel block marking the page order on the raster."""
    g = spec.glyph_size
    x0 = 2 + page_index * (g + 2)
    return x0, 2, x0 + g, 2 + g


def _render_page(tokens, page_index, spec: SyntheticSpec) -> np.ndarray:
    u, v = spec.page_width, spec.page_height
    img = np.zeros((3, v, u), dtype=np.float64)
    marked_range, _ = category_vocab_slices(spec)
    for tok in tokens:
        b = tok.bbox
        # Intensity encodes token identity; marked tokens light channel 1.
        ident = (tok.token_id - FIRST_REGULAR_ID) / max(spec.vocab_size - FIRST_REGULAR_ID, 1)
        img[0, b.y1:b.y2, b.x1:b.x2] = 0.2 + 0.75 * ident
        if marked_range[0] <= tok.token_id < marked_range[1]:
            img[1, b.y1:b.y2, b.x1:b.x2] = 0.9
        else:
            img[1, b.y1:b.y2, b.x1:b.x2] = 0.25
    gx1, gy1, gx2, gy2 = glyph_region(page_index, spec)
    img[:, gy1:gy2, gx1:gx2] = 1.0
    # Match the 8-bit PNG round trip exactly.
    return np.round(img * 255.0) / 255.0


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir: str, seed: int) -> list:
    """Generate a deterministic synthetic corpus and write it to ``out_dir``.

    Documents get balanced categories (round robin); tokens come mostly from
    the document category's vocabulary slice; page rasters carry the token
    rectangles and a per-page-order corner glyph.
    """
    rng = np.random.default_rng(seed)
    marked_range, cat_ranges = category_vocab_slices(spec)
    u, v = spec.page_width, spec.page_height
    g = spec.glyph_size
    top_margin = g + 6
    side_margin = 2
    cell_w = max((u - 2 * side_margin) // 4, 4)
    cell_h = max((v - top_margin - side_margin) // 6, 4)
    n_cols = (u - 2 * side_margin) // cell_w
    n_rows = (v - top_margin - side_margin) // cell_h

    docs = []
    for i in range(spec.num_docs):
        category = i % spec.num_categories
        cat_lo, cat_hi = cat_ranges[category]
        n_pages = int(rng.integers(spec.pages_min, spec.pages_max + 1))
        tokens = []
        pages = []
        for p in range(n_pages):
            n_tok = int(rng.integers(spec.tokens_per_page_min, spec.tokens_per_page_max + 1))
            n_tok = min(n_tok, n_cols * n_rows)
            cells = rng.permutation(n_cols * n_rows)[:n_tok]
            cells.sort()
            page_tokens = []
            for cell in cells:
                r, c = divmod(int(cell), n_cols)
                if rng.random() < spec.marked_token_prob:
                    tid = int(rng.integers(marked_range[0], marked_range[1]))
                    label = 1
                elif rng.random() < spec.category_purity:
                    tid = int(rng.integers(cat_lo, cat_hi))
                    label = 0
                else:
                    other = cat_ranges[int(rng.integers(spec.num_categories))]
                    tid = int(rng.integers(other[0], other[1]))
                    label = 0
                x1 = side_margin + c * cell_w + 1
                y1 = top_margin + r * cell_h + 1
                x2 = x1 + cell_w - 2
                y2 = y1 + cell_h - 2
                page_tokens.append(TokenRecord(tid, BBox(x1, y1, x2, y2), p, label))
            tokens.extend(page_tokens)
            pages.append(PageRecord(p, _image=_render_page(page_tokens, p, spec)))
        docs.append(Document(id=f"doc{i:05d}", pages=pages, tokens=tokens, category=category))
    write_corpus(docs, out_dir)
    return docs
