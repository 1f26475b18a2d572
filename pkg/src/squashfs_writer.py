"""
Minimal SquashFS 4.0 writer (gzip) used to build ground-truthed corpora.

Writes directories and regular files: full data blocks, packed tail
fragments, sparse all-zero blocks, inode/directory/fragment/id tables.
Output is deterministic for a given tree and parameters and readable by
squashfs-tools.
"""

import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from errors import CorpusError
from squashfs_model import (
    BLOCK_UNCOMPRESSED,
    COMPRESSION_GZIP,
    DIR_TYPE,
    FILE_TYPE,
    LDIR_TYPE,
    LREG_TYPE,
    META_UNCOMPRESSED,
    METADATA_SIZE,
    NO_FRAGMENT,
    NO_TABLE,
    SQUASHFS_MAGIC,
    SUPERBLOCK_FORMAT,
    SUPERBLOCK_SIZE,
)

FLAG_NO_FRAGMENTS = 0x0010
FLAG_NO_XATTRS = 0x0200
DEVICE_ALIGN = 4096


# ─── Metadata writer ──────────────────────────────────────────────────────────

class MetadataWriter:

    """Packs a byte stream into 8KiB metadata blocks, compressing when it helps."""

    def __init__(self):
        self._out = bytearray()
        self._pending = bytearray()
        self.block_offsets: List[int] = []

    def position(self) -> Tuple[int, int]:
        """(offset of the block being filled relative to the table, offset inside it)."""
        return len(self._out), len(self._pending)

    def write(self, data: bytes) -> None:
        self._pending += data
        while len(self._pending) >= METADATA_SIZE:
            self._flush(METADATA_SIZE)

    def _flush(self, count: int) -> None:
        chunk = bytes(self._pending[:count])
        del self._pending[:count]
        packed = zlib.compress(chunk, 9)
        self.block_offsets.append(len(self._out))
        if len(packed) < len(chunk):
            self._out += struct.pack("<H", len(packed)) + packed
        else:
            self._out += struct.pack("<H", len(chunk) | META_UNCOMPRESSED) + chunk

    def finish(self) -> bytes:
        if self._pending:
            self._flush(len(self._pending))
        return bytes(self._out)


# ─── Tree model ───────────────────────────────────────────────────────────────

@dataclass
class _Node:
    name: str
    content: Optional[bytes] = None  # None for directories
    children: Dict[str, "_Node"] = field(default_factory=dict)
    inode_number: int = 0
    ref: int = 0
    blocks_start: int = 0
    block_sizes: List[int] = field(default_factory=list)
    fragment: int = NO_FRAGMENT
    frag_offset: int = 0

    @property
    def is_dir(self) -> bool:
        return self.content is None


def _build_tree(files: Mapping[str, bytes], directories: Tuple[str, ...]) -> _Node:
    root = _Node("")
    for path in list(directories) + list(files):
        parts = [p for p in path.strip("/").split("/") if p]
        if not parts:
            continue
        if any(p in (".", "..") for p in parts):
            raise CorpusError(f"invalid path {path!r}")
        node = root
        for part in parts[:-1]:
            child = node.children.setdefault(part, _Node(part))
            if not child.is_dir:
                raise CorpusError(f"{path!r} nests under a regular file")
            node = child
        leaf = parts[-1]
        if path in files:
            if leaf in node.children:
                raise CorpusError(f"duplicate path {path!r}")
            node.children[leaf] = _Node(leaf, content=bytes(files[path]))
        else:
            node.children.setdefault(leaf, _Node(leaf))
    return root


def _walk_files(node: _Node, prefix: str = "") -> List[Tuple[str, _Node]]:
    found = []
    for name in sorted(node.children):
        child = node.children[name]
        path = f"{prefix}/{name}"
        if child.is_dir:
            found.extend(_walk_files(child, path))
        else:
            found.append((path, child))
    return found


def _number_inodes(node: _Node, counter: List[int]) -> None:
    for name in sorted(node.children):
        child = node.children[name]
        if child.is_dir:
            _number_inodes(child, counter)
        else:
            counter[0] += 1
            child.inode_number = counter[0]
    counter[0] += 1
    node.inode_number = counter[0]


# ─── Image builder ────────────────────────────────────────────────────────────

class ImageBuilder:

    def __init__(self, block_size: int = 131072, mod_time: int = 0, use_fragments: bool = True):
        if block_size & (block_size - 1) or not 4096 <= block_size <= 1048576:
            raise CorpusError(f"block size {block_size} must be a power of two in [4096, 1048576]")
        self.block_size = block_size
        self.block_log = block_size.bit_length() - 1
        self.mod_time = mod_time
        self.use_fragments = use_fragments
        self._data = bytearray()
        self._fragments: List[Tuple[int, int]] = []  # (start, on-disk size word)
        self._frag_buffer = bytearray()

    # -- data section --

    def _position(self) -> int:
        return SUPERBLOCK_SIZE + len(self._data)

    def _write_block(self, block: bytes) -> int:
        """Append one block; returns its on-disk size word (0 for sparse)."""
        if not any(block):
            return 0
        packed = zlib.compress(block, 9)
        if len(packed) < len(block):
            self._data += packed
            return len(packed)
        self._data += block
        return len(block) | BLOCK_UNCOMPRESSED

    def _flush_fragment(self) -> None:
        if not self._frag_buffer:
            return
        start = self._position()
        block = bytes(self._frag_buffer)
        packed = zlib.compress(block, 9)
        if len(packed) < len(block):
            self._data += packed
            size = len(packed)
        else:
            self._data += block
            size = len(block) | BLOCK_UNCOMPRESSED
        self._fragments.append((start, size))
        self._frag_buffer.clear()

    def _store_file(self, node: _Node) -> None:
        content = node.content
        bs = self.block_size
        node.blocks_start = self._position()
        if self.use_fragments:
            full = len(content) // bs
            tail = content[full * bs:]
        else:
            full = (len(content) + bs - 1) // bs
            tail = b""
        for i in range(full):
            node.block_sizes.append(self._write_block(content[i * bs:(i + 1) * bs]))
        if tail:
            if len(self._frag_buffer) + len(tail) > bs:
                self._flush_fragment()
            node.fragment = len(self._fragments)
            node.frag_offset = len(self._frag_buffer)
            self._frag_buffer += tail

    # -- metadata --

    def _file_inode(self, node: _Node) -> bytes:
        size = len(node.content)
        sizes = struct.pack(f"<{len(node.block_sizes)}I", *node.block_sizes)
        if node.blocks_start < 1 << 32 and size < 1 << 32:
            header = struct.pack("<HHHHII", FILE_TYPE, 0o644, 0, 0, self.mod_time, node.inode_number)
            body = struct.pack("<IIII", node.blocks_start, node.fragment, node.frag_offset, size)
        else:
            header = struct.pack("<HHHHII", LREG_TYPE, 0o644, 0, 0, self.mod_time, node.inode_number)
            body = struct.pack("<QQQIIII", node.blocks_start, size, 0, 1, node.fragment,
                               node.frag_offset, 0xFFFFFFFF)
        return header + body + sizes

    @staticmethod
    def _listing(node: _Node) -> bytes:
        out = bytearray()
        names = sorted(node.children)
        i = 0
        while i < len(names):
            first = node.children[names[i]]
            start_block = first.ref >> 16
            base = first.inode_number
            run = []
            while i < len(names) and len(run) < 256:
                child = node.children[names[i]]
                if child.ref >> 16 != start_block or not -32768 <= child.inode_number - base <= 32767:
                    break
                run.append(child)
                i += 1
            out += struct.pack("<III", len(run) - 1, start_block, base)
            for child in run:
                name = child.name.encode("utf-8", "surrogateescape")
                kind = DIR_TYPE if child.is_dir else FILE_TYPE
                out += struct.pack("<HhHH", child.ref & 0xFFFF, child.inode_number - base, kind, len(name) - 1)
                out += name
        return bytes(out)

    def _write_dir(self, node: _Node, parent_number: int, inodes: MetadataWriter, dirs: MetadataWriter) -> None:
        for name in sorted(node.children):
            child = node.children[name]
            if child.is_dir:
                self._write_dir(child, node.inode_number, inodes, dirs)
            else:
                block, offset = inodes.position()
                child.ref = block << 16 | offset
                inodes.write(self._file_inode(child))

        dir_block, dir_offset = dirs.position()
        listing = self._listing(node)
        dirs.write(listing)
        file_size = len(listing) + 3
        nlink = 2 + sum(1 for c in node.children.values() if c.is_dir)

        block, offset = inodes.position()
        node.ref = block << 16 | offset
        if file_size <= 0xFFFF:
            inodes.write(struct.pack("<HHHHII", DIR_TYPE, 0o755, 0, 0, self.mod_time, node.inode_number))
            inodes.write(struct.pack("<IIHHI", dir_block, nlink, file_size, dir_offset, parent_number))
        else:
            inodes.write(struct.pack("<HHHHII", LDIR_TYPE, 0o755, 0, 0, self.mod_time, node.inode_number))
            inodes.write(struct.pack("<IIIIHHI", nlink, file_size, dir_block, parent_number, 0,
                                     dir_offset, 0xFFFFFFFF))

    def build(self, files: Mapping[str, bytes], directories: Tuple[str, ...] = ()) -> bytes:
        root = _build_tree(files, directories)
        for _path, node in _walk_files(root):
            self._store_file(node)
        self._flush_fragment()

        counter = [0]
        _number_inodes(root, counter)
        inode_count = counter[0]

        inodes, dirs = MetadataWriter(), MetadataWriter()
        self._write_dir(root, inode_count + 1, inodes, dirs)

        image = bytearray(bytes(SUPERBLOCK_SIZE) + self._data)
        inode_table_start = len(image)
        image += inodes.finish()
        directory_table_start = len(image)
        image += dirs.finish()

        frag_meta = MetadataWriter()
        for start, size in self._fragments:
            frag_meta.write(struct.pack("<QII", start, size, 0))
        frag_blocks_start = len(image)
        image += frag_meta.finish()
        fragment_table_start = len(image)
        for rel in frag_meta.block_offsets:
            image += struct.pack("<Q", frag_blocks_start + rel)

        id_meta = MetadataWriter()
        id_meta.write(struct.pack("<I", 0))
        id_blocks_start = len(image)
        image += id_meta.finish()
        id_table_start = len(image)
        for rel in id_meta.block_offsets:
            image += struct.pack("<Q", id_blocks_start + rel)

        bytes_used = len(image)
        flags = FLAG_NO_XATTRS | (0 if self.use_fragments else FLAG_NO_FRAGMENTS)
        image[:SUPERBLOCK_SIZE] = struct.pack(
            SUPERBLOCK_FORMAT,
            SQUASHFS_MAGIC, inode_count, self.mod_time, self.block_size, len(self._fragments),
            COMPRESSION_GZIP, self.block_log, flags, 1, 4, 0, root.ref, bytes_used,
            id_table_start, NO_TABLE, inode_table_start, directory_table_start,
            fragment_table_start, NO_TABLE,
        )
        image += bytes(-len(image) % DEVICE_ALIGN)
        return bytes(image)


def build_squashfs(files: Mapping[str, bytes], block_size: int = 131072, mod_time: int = 0,
                   use_fragments: bool = True, directories: Tuple[str, ...] = ()) -> bytes:
    """Build a SquashFS image from a {path: content} mapping."""
    return ImageBuilder(block_size, mod_time, use_fragments).build(files, directories)
