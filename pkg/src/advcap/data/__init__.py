from .corpus import group_by_image, load_caption_records, load_coco_captions
from .toyworld import (
    DatasetSplit,
    ImageItem,
    ToyDataset,
    ToyWorldConfig,
    encode_references,
    generate_toy_dataset,
    load_dataset,
    read_manifest,
    save_dataset,
)
from .vocab import (
    END,
    END_ID,
    PAD,
    PAD_ID,
    START,
    START_ID,
    TOKENIZER_VERSION,
    UNK,
    UNK_ID,
    Caption,
    Vocabulary,
    build_vocabulary,
    tokenize,
)
