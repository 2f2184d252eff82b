import hashlib

import torch


def derive_seed(root: int, *names) -> int:
    """Split a root seed into an independent named stream."""
    key = "/".join([str(root), *[str(name) for name in names]])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(root: int, *names) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(root, *names))
    return generator
