"""Synthetic scenes with grammar-generated reference captions.

Stands in for an image-caption corpus: every scene is a tuple of attribute
values, its global feature is a noisy linear mix of the attribute one-hots,
its object feature marks the scene's object, and its references are
independent grammar realizations with Zipf-weighted synonyms and templates.
Skewed synonym weights are what give a maximum-likelihood model something
to over-use.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError, IntegrityError
from .vocab import TOKENIZER_VERSION, Caption, Vocabulary, build_vocabulary, tokenize

FORMAT = "advcap-toy/1"
SPLITS = ("train", "val", "test")

DEFAULT_ATTRIBUTES = {
    "object": {
        "dog": ["dog", "puppy", "pup", "hound"],
        "cat": ["cat", "kitten", "kitty", "feline"],
        "man": ["man", "guy", "gentleman", "fellow"],
        "woman": ["woman", "lady", "girl", "female"],
        "horse": ["horse", "pony", "stallion", "mare"],
        "bird": ["bird", "birdie", "songbird", "fowl"],
        "bus": ["bus", "coach", "shuttle", "minibus"],
        "car": ["car", "automobile", "sedan", "hatchback"],
        "boat": ["boat", "ship", "vessel", "canoe"],
        "child": ["child", "kid", "boy", "youngster"],
        "cow": ["cow", "calf", "ox", "heifer"],
        "bicycle": ["bicycle", "bike", "cycle", "tandem"],
    },
    "color": {
        "red": ["red", "crimson", "scarlet"],
        "blue": ["blue", "navy", "azure"],
        "green": ["green", "emerald", "olive"],
        "white": ["white", "pale", "ivory"],
        "black": ["black", "dark", "ebony"],
        "brown": ["brown", "tan", "chestnut"],
        "yellow": ["yellow", "golden", "amber"],
        "gray": ["gray", "grey", "silver"],
    },
    "action": {
        "standing": ["standing", "is standing", "stands still", "posing"],
        "running": ["running", "is running", "runs fast", "racing"],
        "sitting": ["sitting", "is sitting", "sits quietly", "resting"],
        "moving": ["moving", "is moving", "travels along", "going"],
        "waiting": ["waiting", "is waiting", "waits patiently", "lingering"],
        "jumping": ["jumping", "is jumping", "leaps up", "hopping"],
        "sleeping": ["sleeping", "is sleeping", "naps", "dozing"],
        "looking": ["looking around", "is looking around", "glances about", "gazing"],
        "playing": ["playing", "is playing", "plays happily", "frolicking"],
        "turning": ["turning", "is turning", "turns slowly", "spinning"],
    },
    "location": {
        "beach": ["on the beach", "on the sand", "by the ocean", "near the shore"],
        "park": ["in a park", "in the park", "on the grass", "in a garden"],
        "street": ["on a street", "on the road", "in traffic", "down the avenue"],
        "field": ["in a field", "in a meadow", "on a farm", "in the countryside"],
        "snow": ["in the snow", "on a snowy hill", "in the winter", "on the ice"],
        "city": ["in the city", "downtown", "near tall buildings", "in an urban area"],
        "river": ["by the river", "near the water", "along the bank", "beside a stream"],
        "forest": ["in the forest", "in the woods", "among trees", "under the pines"],
        "yard": ["in a yard", "in the backyard", "behind a house", "near a fence"],
        "market": ["at the market", "near some shops", "outside a store", "by a vendor"],
    },
}

DEFAULT_TEMPLATES = [
    "{det} {color} {object} {action} {location}",
    "{det} {object} {action} {location}",
    "there is {det} {color} {object} {action} {location}",
    "{location} {det} {color} {object} {action}",
    "a photo of {det} {color} {object} {action} {location}",
    "{det} {color} colored {object} {action} {location}",
    "{det} {object} {action} {location} in {color}",
]

DEFAULT_DETERMINERS = ["a", "the", "one"]

_SLOT = re.compile(r"\{(\w+)\}")


@dataclass
class ToyWorldConfig:
    attributes: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_ATTRIBUTES))
    templates: list = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    determiners: list = field(default_factory=lambda: list(DEFAULT_DETERMINERS))
    object_attribute: str = "object"
    k: int = 5
    feature_dim: int = 32
    feature_noise: float = 0.1
    synonym_zipf: float = 1.0
    template_zipf: float = 1.0
    use_synonyms: bool = True
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def validate(self):
        if self.object_attribute not in self.attributes:
            raise ConfigError(f"object attribute {self.object_attribute!r} not in attribute schema")
        if not self.templates:
            raise ConfigError("grammar needs at least one template")
        known = set(self.attributes) | {"det"}
        for template in self.templates:
            for slot in _SLOT.findall(template):
                if slot not in known:
                    raise ConfigError(f"template {template!r} uses unknown slot {{{slot}}}")
        for name, values in self.attributes.items():
            if not values:
                raise ConfigError(f"attribute {name!r} has no values")
            for value, phrases in values.items():
                if not phrases or any(not tokenize(p) for p in phrases):
                    raise ConfigError(f"production {name}={value!r} has an empty phrase")
        if not self.determiners:
            raise ConfigError("grammar needs at least one determiner")
        for obj in self.attributes[self.object_attribute]:
            if len(tokenize(obj)) != 1:
                raise ConfigError(f"object value {obj!r} must be a single word")
        if self.k < 1 or self.feature_dim < 1:
            raise ConfigError("k and feature_dim must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one scene")

    @property
    def object_words(self) -> list[str]:
        return list(self.attributes[self.object_attribute])


@dataclass
class ImageItem:
    image_id: int
    x_c: np.ndarray
    x_o: np.ndarray
    references: list[str]


@dataclass
class DatasetSplit:
    tag: str
    items: list[ImageItem]

    def __len__(self):
        return len(self.items)

    def features(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([it.x_c for it in self.items]),
                np.stack([it.x_o for it in self.items]))

    def captions(self) -> list[list[str]]:
        """All reference captions, tokenized, in item order."""
        return [tokenize(r) for it in self.items for r in it.references]


@dataclass
class ToyDataset:
    config: ToyWorldConfig
    seed: int
    vocab: Vocabulary
    splits: dict

    @property
    def train(self) -> DatasetSplit:
        return self.splits["train"]

    @property
    def val(self) -> DatasetSplit:
        return self.splits["val"]

    @property
    def test(self) -> DatasetSplit:
        return self.splits["test"]

    @property
    def image_dim(self) -> int:
        return self.config.feature_dim

    @property
    def object_dim(self) -> int:
        return len(self.config.object_words)


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _realize(config: ToyWorldConfig, scene: dict, rng: np.random.Generator) -> str:
    templates = config.templates if config.use_synonyms else config.templates[:1]
    template = templates[rng.choice(len(templates), p=_zipf(len(templates), config.template_zipf))]
    fills = {}
    for slot in _SLOT.findall(template):
        if slot == "det":
            options = config.determiners
        else:
            options = config.attributes[slot][scene[slot]]
        if not config.use_synonyms:
            options = options[:1]
        fills[slot] = options[rng.choice(len(options), p=_zipf(len(options), config.synonym_zipf))]
    return " ".join(template.format(**fills).split())


def grammar_words(config: ToyWorldConfig) -> list[str]:
    """Every word the grammar can emit, sorted."""
    words = set()
    for template in config.templates:
        words.update(tokenize(_SLOT.sub(" ", template)))
    for phrase in config.determiners:
        words.update(tokenize(phrase))
    for values in config.attributes.values():
        for phrases in values.values():
            for phrase in phrases:
                words.update(tokenize(phrase))
    return sorted(words)


def generate_toy_dataset(config: ToyWorldConfig | None = None, seed: int = 0) -> ToyDataset:
    config = config or ToyWorldConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    names = list(config.attributes)
    values = {n: list(config.attributes[n]) for n in names}
    offsets = np.cumsum([0] + [len(values[n]) for n in names])
    onehot_dim = int(offsets[-1])
    mixing = rng.normal(size=(onehot_dim, config.feature_dim)) / np.sqrt(len(names))
    objects = config.object_words

    splits = {}
    next_id = 0
    for tag, size in zip(SPLITS, (config.n_train, config.n_val, config.n_test)):
        items = []
        for _ in range(size):
            scene = {n: values[n][rng.integers(len(values[n]))] for n in names}
            onehot = np.zeros(onehot_dim)
            for j, n in enumerate(names):
                onehot[offsets[j] + values[n].index(scene[n])] = 1.0
            x_c = onehot @ mixing + config.feature_noise * rng.normal(size=config.feature_dim)
            x_o = np.zeros(len(objects))
            x_o[objects.index(scene[config.object_attribute])] = rng.uniform(0.7, 1.0)
            refs = [_realize(config, scene, rng) for _ in range(config.k)]
            items.append(ImageItem(next_id, x_c, x_o, refs))
            next_id += 1
        splits[tag] = DatasetSplit(tag, items)

    vocab = build_vocabulary(splits["train"].captions(), 1, objects, grammar_words(config))
    _check_coverage(splits, vocab)
    return ToyDataset(config, seed, vocab, splits)


def _check_coverage(splits: dict, vocab: Vocabulary):
    for split in splits.values():
        for item in split.items:
            for ref in item.references:
                unknown = [w for w in tokenize(ref) if w not in vocab]
                if unknown:
                    raise ConfigError(f"grammar produced words outside the vocabulary: {unknown}")


def encode_references(split: DatasetSplit, vocab: Vocabulary, max_words: int) -> list[list[Caption]]:
    return [[vocab.encode(r, max_words) for r in item.references] for item in split.items]


def reference_stats(dataset: ToyDataset) -> dict:
    """Diversity of the human references of the held-out splits, scored against train."""
    from ..metrics import diversity_report

    training = dataset.train.captions()
    out = {}
    for tag in ("val", "test"):
        split = dataset.splits[tag]
        sets = {it.image_id: [tuple(tokenize(r)) for r in it.references] for it in split.items}
        k = min(len(v) for v in sets.values())
        out[tag] = {variant: diversity_report(sets, training, variant).row()
                    for variant in (f"1 of {k}", f"{k} of {k}")}
    return out


# persistence

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(dataset: ToyDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for tag, split in dataset.splits.items():
        path = out / f"{tag}.jsonl"
        with path.open("w", encoding="utf-8") as fh:
            for it in split.items:
                fh.write(json.dumps({"image_id": it.image_id, "x_c": it.x_c.tolist(),
                                     "x_o": it.x_o.tolist(), "references": it.references},
                                    sort_keys=True) + "\n")
        files[path.name] = _sha256(path)
    vocab_path = out / "vocab.txt"
    dataset.vocab.save(vocab_path)
    files[vocab_path.name] = _sha256(vocab_path)
    manifest = {
        "format": FORMAT,
        "tokenizer_version": TOKENIZER_VERSION,
        "seed": dataset.seed,
        "config": asdict(dataset.config),
        "object_words": dataset.config.object_words,
        "vocab_hash": dataset.vocab.hash(),
        "files": files,
        "reference_stats": reference_stats(dataset),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return out


def load_dataset(data_dir) -> ToyDataset:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise IntegrityError(f"unsupported dataset format {manifest.get('format')!r}")
    for name, digest in manifest["files"].items():
        if _sha256(root / name) != digest:
            raise IntegrityError(f"{name} does not match the hash recorded in the manifest")
    config = ToyWorldConfig(**manifest["config"])
    vocab = Vocabulary.load(root / "vocab.txt", manifest["object_words"])
    splits = {}
    seen: set[int] = set()
    for tag in SPLITS:
        items = []
        with (root / f"{tag}.jsonl").open(encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["image_id"] in seen:
                    raise IntegrityError(f"image id {rec['image_id']} appears in more than one split")
                seen.add(rec["image_id"])
                items.append(ImageItem(rec["image_id"], np.asarray(rec["x_c"], dtype=np.float64),
                                       np.asarray(rec["x_o"], dtype=np.float64), rec["references"]))
        splits[tag] = DatasetSplit(tag, items)
    return ToyDataset(config, manifest["seed"], vocab, splits)


def read_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text(encoding="utf-8"))
