"""
Read-only SquashFS 4.0 (little-endian, gzip) parser.

Decodes the superblock, metadata streams, the inode/directory walk and the
fragment table, and builds the unit inventory the repair stages work on:
every independently inflatable zlib unit (tail-fragment blocks and full data
blocks) with the files that own it.
"""

import logging
import posixpath
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from errors import (
    BadMagicError,
    DirectoryCycleError,
    MetadataError,
    SquashfsError,
    TableRangeError,
    UnsupportedError,
)
from zlib_oracle import check_candidate, quick_check

logger = logging.getLogger(__name__)


# ─── On-disk constants ────────────────────────────────────────────────────────

SQUASHFS_MAGIC = 0x73717368
SUPERBLOCK_FORMAT = "<IIIIIHHHHHHQQQQQQQQ"
SUPERBLOCK_SIZE = struct.calcsize(SUPERBLOCK_FORMAT)  # 96
NO_TABLE = 0xFFFFFFFFFFFFFFFF
NO_FRAGMENT = 0xFFFFFFFF
METADATA_SIZE = 8192
META_UNCOMPRESSED = 1 << 15
BLOCK_UNCOMPRESSED = 1 << 24
FRAGMENT_ENTRY_FORMAT = "<QII"
FRAGMENT_ENTRY_SIZE = 16

COMPRESSION_GZIP = 1
COMPRESSION_NAMES = {1: "gzip", 2: "lzma", 3: "lzo", 4: "xz", 5: "lz4", 6: "zstd"}

# inode types
DIR_TYPE, FILE_TYPE, SYMLINK_TYPE, BLKDEV_TYPE, CHRDEV_TYPE, FIFO_TYPE, SOCKET_TYPE = range(1, 8)
LDIR_TYPE, LREG_TYPE, LSYMLINK_TYPE, LBLKDEV_TYPE, LCHRDEV_TYPE, LFIFO_TYPE, LSOCKET_TYPE = range(8, 15)

ROLE_TAIL = "tail-end fragment"
ROLE_BLOCK = "full data block"


# ─── Domain types ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Superblock:
    magic: int
    inode_count: int
    mod_time: int
    block_size: int
    fragment_entry_count: int
    compression_id: int
    block_log: int
    flags: int
    id_count: int
    version_major: int
    version_minor: int
    root_inode_ref: int
    bytes_used: int
    id_table_start: int
    xattr_id_table_start: int
    inode_table_start: int
    directory_table_start: int
    fragment_table_start: int
    export_table_start: int

    @property
    def compression(self) -> str:
        return COMPRESSION_NAMES.get(self.compression_id, f"unknown({self.compression_id})")


@dataclass
class Owner:
    """One file's claim on a unit: the byte range [offset, offset+length) of the payload."""
    inode_number: int
    path: str
    role: str
    offset: int
    length: int


@dataclass
class FragmentRecord:
    index: int
    kind: str  # "fragment" | "block"
    start: int
    compressed_len: int
    is_compressed: bool
    max_decompressed_len: int
    owners: List[Owner] = field(default_factory=list)
    table_index: Optional[int] = None

    @property
    def end(self) -> int:
        return self.start + self.compressed_len


@dataclass(frozen=True)
class BlockRef:
    start: int
    compressed_len: int
    is_compressed: bool

    @property
    def sparse(self) -> bool:
        return self.compressed_len == 0


@dataclass(frozen=True)
class TailRef:
    fragment_index: int
    offset: int
    length: int


@dataclass
class InodeSummary:
    inode_number: int
    file_path: str
    file_size: int
    kind: str = "file"  # file | symlink | device | ipc
    blocks: List[BlockRef] = field(default_factory=list)
    tail: Optional[TailRef] = None
    symlink_target: Optional[str] = None
    unit_ids: List[int] = field(default_factory=list)  # filled by build_inventory, block order then tail


@dataclass(frozen=True)
class MetadataBlock:
    offset: int  # absolute offset of the 2-byte header
    compressed_len: int
    is_compressed: bool

    @property
    def data_start(self) -> int:
        return self.offset + 2


@dataclass
class MetadataStream:
    data: bytes
    block_map: Dict[int, int]  # on-disk offset relative to table start -> stream offset
    blocks: List[MetadataBlock]


@dataclass
class Inventory:
    superblock: Superblock
    units: List[FragmentRecord]
    files: List[InodeSummary]
    fragment_blocks: int = 0
    data_blocks: int = 0


# ─── Helpers ──────────────────────────────────────────────────────────────────

def _unpack(fmt: str, buf: bytes, pos: int, what: str) -> tuple:
    try:
        return struct.unpack_from(fmt, buf, pos)
    except struct.error:
        raise SquashfsError(f"{what} truncated at offset {pos:#x}") from None


def _check_range(image: bytes, start: int, length: int, what: str) -> None:
    if start < 0 or length < 0 or start + length > len(image):
        raise TableRangeError(f"{what} [{start:#x}, {start + length:#x}) outside image of {len(image):#x} bytes")


# ─── Superblock ───────────────────────────────────────────────────────────────

def parse_superblock(image: bytes) -> Superblock:
    """Decode and validate the 96-byte superblock at the start of image."""
    if len(image) < SUPERBLOCK_SIZE:
        raise SquashfsError(f"image too short for a superblock ({len(image)} bytes)")
    sb = Superblock(*struct.unpack_from(SUPERBLOCK_FORMAT, image, 0))

    if sb.magic != SQUASHFS_MAGIC:
        raise BadMagicError(f"bad magic {sb.magic:#010x}, not a SquashFS image")
    if (sb.version_major, sb.version_minor) != (4, 0):
        raise UnsupportedError(f"unsupported SquashFS version {sb.version_major}.{sb.version_minor}")
    if sb.block_log > 31 or sb.block_size != 1 << sb.block_log:
        raise SquashfsError(f"block_size {sb.block_size} inconsistent with block_log {sb.block_log}")
    if not 4096 <= sb.block_size <= 1048576:
        raise SquashfsError(f"block_size {sb.block_size} outside [4096, 1048576]")
    if sb.compression_id != COMPRESSION_GZIP:
        raise UnsupportedError(f"unsupported compressor {sb.compression}; only gzip is handled")

    for name in ("inode_table_start", "directory_table_start", "fragment_table_start",
                 "id_table_start", "xattr_id_table_start", "export_table_start"):
        value = getattr(sb, name)
        if value != NO_TABLE and value >= sb.bytes_used:
            raise TableRangeError(f"{name} {value:#x} beyond bytes_used {sb.bytes_used:#x}")
    if sb.inode_table_start == NO_TABLE or sb.directory_table_start == NO_TABLE:
        raise TableRangeError("inode or directory table missing")
    if sb.bytes_used > len(image):
        raise TableRangeError(f"bytes_used {sb.bytes_used:#x} exceeds image length {len(image):#x}")
    return sb


# ─── Metadata blocks ──────────────────────────────────────────────────────────

def read_metadata_block(image: bytes, offset: int, max_len: int = METADATA_SIZE) -> Tuple[bytes, MetadataBlock]:
    """Decode the single metadata block whose header sits at offset."""
    _check_range(image, offset, 2, "metadata block header")
    header = int.from_bytes(image[offset:offset + 2], "little")
    length = header & ~META_UNCOMPRESSED
    compressed = not header & META_UNCOMPRESSED
    if length == 0:
        raise MetadataError(f"zero-length metadata block at {offset:#x}", offset)
    _check_range(image, offset + 2, length, "metadata block")
    block = MetadataBlock(offset, length, compressed)
    raw = image[offset + 2:offset + 2 + length]
    if not compressed:
        if length > max_len:
            raise MetadataError(f"metadata block at {offset:#x} holds {length} > {max_len} bytes", offset)
        return raw, block

    payload = quick_check(raw, max_len)
    if payload is None:
        verdict = check_candidate(raw, max_len)
        if not verdict.valid:
            raise MetadataError(
                f"metadata block at {offset:#x} failed to inflate: {verdict.status.value} ({verdict.reason})",
                offset,
            )
        payload = verdict.payload
    return payload, block


def read_metadata_blocks(image: bytes, start_offset: int, end_offset: Optional[int] = None,
                         max_len: int = METADATA_SIZE) -> MetadataStream:
    """Concatenate the payloads of consecutive metadata blocks in [start_offset, end_offset)."""
    end = len(image) if end_offset is None else min(end_offset, len(image))
    pos = start_offset
    chunks: List[bytes] = []
    block_map: Dict[int, int] = {}
    blocks: List[MetadataBlock] = []
    stream_len = 0
    while pos + 2 <= end:
        payload, block = read_metadata_block(image, pos, max_len)
        block_map[pos - start_offset] = stream_len
        blocks.append(block)
        chunks.append(payload)
        stream_len += len(payload)
        pos = block.data_start + block.compressed_len
    return MetadataStream(b"".join(chunks), block_map, blocks)


def _read_indexed_table(image: bytes, index_start: int, entry_bytes: int, what: str) -> bytes:
    """Read a table stored as metadata blocks located through an array of u64 pointers."""
    if entry_bytes == 0:
        return b""
    n_blocks = (entry_bytes + METADATA_SIZE - 1) // METADATA_SIZE
    _check_range(image, index_start, n_blocks * 8, f"{what} index")
    pointers = struct.unpack_from(f"<{n_blocks}Q", image, index_start)
    chunks = []
    for pointer in pointers:
        payload, _ = read_metadata_block(image, pointer)
        chunks.append(payload)
    data = b"".join(chunks)
    if len(data) < entry_bytes:
        raise SquashfsError(f"{what} holds {len(data)} bytes, expected {entry_bytes}")
    return data


def table_boundaries(image: bytes, sb: Superblock) -> List[int]:
    """Every known table start plus the first block each index points to, sorted."""
    bounds = {sb.bytes_used}
    for value in (sb.inode_table_start, sb.directory_table_start, sb.fragment_table_start,
                  sb.id_table_start, sb.xattr_id_table_start, sb.export_table_start):
        if value != NO_TABLE:
            bounds.add(value)
    indexed = [(sb.fragment_table_start, sb.fragment_entry_count),
               (sb.id_table_start, sb.id_count),
               (sb.export_table_start, 1)]
    for start, count in indexed:
        if start != NO_TABLE and count and start + 8 <= len(image):
            pointer = int.from_bytes(image[start:start + 8], "little")
            if pointer < sb.bytes_used:
                bounds.add(pointer)
    return sorted(bounds)


def _region_end(start: int, bounds: Iterable[int]) -> int:
    return min(b for b in bounds if b > start)


# ─── Fragment table ───────────────────────────────────────────────────────────

def load_fragment_table(image: bytes, sb: Superblock) -> List[FragmentRecord]:
    """One FragmentRecord per fragment table entry; owners are filled by build_inventory."""
    count = sb.fragment_entry_count
    if count == 0:
        return []
    if sb.fragment_table_start == NO_TABLE:
        raise TableRangeError(f"{count} fragments declared but no fragment table")
    data = _read_indexed_table(image, sb.fragment_table_start, count * FRAGMENT_ENTRY_SIZE, "fragment table")

    records = []
    for i in range(count):
        start, size, _unused = struct.unpack_from(FRAGMENT_ENTRY_FORMAT, data, i * FRAGMENT_ENTRY_SIZE)
        length = size & ~BLOCK_UNCOMPRESSED
        if length == 0 or start + length > sb.bytes_used:
            raise TableRangeError(
                f"fragment {i} [{start:#x}, +{length}) outside archive of {sb.bytes_used:#x} bytes"
            )
        records.append(FragmentRecord(
            index=i,
            kind="fragment",
            start=start,
            compressed_len=length,
            is_compressed=not size & BLOCK_UNCOMPRESSED,
            max_decompressed_len=sb.block_size,
            table_index=i,
        ))
    return records


# ─── Inodes & directories ─────────────────────────────────────────────────────

@dataclass
class _Inode:
    inode_type: int
    inode_number: int
    file_size: int = 0
    blocks_start: int = 0
    fragment: int = NO_FRAGMENT
    frag_offset: int = 0
    block_sizes: Tuple[int, ...] = ()
    dir_block: int = 0
    dir_offset: int = 0
    symlink_target: Optional[str] = None


def _inode_position(stream: MetadataStream, ref: int) -> int:
    block, offset = ref >> 16, ref & 0xFFFF
    if block not in stream.block_map:
        raise SquashfsError(f"inode reference {ref:#x} points outside the inode table")
    return stream.block_map[block] + offset


def _parse_inode(stream: MetadataStream, ref: int, block_size: int) -> _Inode:
    buf = stream.data
    pos = _inode_position(stream, ref)
    inode_type, _mode, _uid, _gid, _mtime, number = _unpack("<HHHHII", buf, pos, "inode header")
    pos += 16
    inode = _Inode(inode_type, number)

    if inode_type in (FILE_TYPE, LREG_TYPE):
        if inode_type == FILE_TYPE:
            blocks_start, fragment, frag_offset, file_size = _unpack("<IIII", buf, pos, "file inode")
            pos += 16
        else:
            blocks_start, file_size, _sparse, _nlink, fragment, frag_offset, _xattr = _unpack(
                "<QQQIIII", buf, pos, "extended file inode")
            pos += 40
        if fragment == NO_FRAGMENT:
            n_blocks = (file_size + block_size - 1) // block_size
        else:
            n_blocks = file_size // block_size
        inode.block_sizes = _unpack(f"<{n_blocks}I", buf, pos, "block list")
        inode.blocks_start, inode.file_size = blocks_start, file_size
        inode.fragment, inode.frag_offset = fragment, frag_offset
    elif inode_type == DIR_TYPE:
        block, _nlink, file_size, offset, _parent = _unpack("<IIHHI", buf, pos, "directory inode")
        inode.dir_block, inode.dir_offset, inode.file_size = block, offset, file_size
    elif inode_type == LDIR_TYPE:
        _nlink, file_size, block, _parent, _icount, offset, _xattr = _unpack(
            "<IIIIHHI", buf, pos, "extended directory inode")
        inode.dir_block, inode.dir_offset, inode.file_size = block, offset, file_size
    elif inode_type in (SYMLINK_TYPE, LSYMLINK_TYPE):
        _nlink, size = _unpack("<II", buf, pos, "symlink inode")
        pos += 8
        if pos + size > len(buf):
            raise SquashfsError(f"symlink target of inode {number} truncated")
        inode.symlink_target = buf[pos:pos + size].decode("utf-8", "surrogateescape")
        inode.file_size = size
    elif inode_type in (BLKDEV_TYPE, CHRDEV_TYPE, FIFO_TYPE, SOCKET_TYPE,
                        LBLKDEV_TYPE, LCHRDEV_TYPE, LFIFO_TYPE, LSOCKET_TYPE):
        pass
    else:
        raise SquashfsError(f"unknown inode type {inode_type} for inode {number}")
    return inode


def _list_directory(dirs: MetadataStream, inode: _Inode) -> List[Tuple[str, int]]:
    """Return (name, inode ref) pairs of one directory listing."""
    if inode.file_size <= 3:
        return []
    if inode.dir_block not in dirs.block_map:
        raise SquashfsError(f"directory listing of inode {inode.inode_number} outside directory table")
    buf = dirs.data
    pos = dirs.block_map[inode.dir_block] + inode.dir_offset
    end = pos + inode.file_size - 3
    if end > len(buf):
        raise SquashfsError(f"directory listing of inode {inode.inode_number} truncated")

    entries = []
    while pos < end:
        count, start_block, _base = _unpack("<III", buf, pos, "directory header")
        pos += 12
        for _ in range(count + 1):
            offset, _delta, _type, name_size = _unpack("<HhHH", buf, pos, "directory entry")
            pos += 8
            name = buf[pos:pos + name_size + 1].decode("utf-8", "surrogateescape")
            pos += name_size + 1
            if name in (".", "..") or "/" in name or not name:
                raise SquashfsError(f"invalid entry name {name!r} in inode {inode.inode_number}")
            entries.append((name, start_block << 16 | offset))
    return entries


def _metadata_streams(image: bytes, sb: Superblock) -> Tuple[MetadataStream, MetadataStream]:
    bounds = table_boundaries(image, sb)
    inodes = read_metadata_blocks(image, sb.inode_table_start, _region_end(sb.inode_table_start, bounds))
    dirs = read_metadata_blocks(image, sb.directory_table_start, _region_end(sb.directory_table_start, bounds))
    return inodes, dirs


def _summarize(inode: _Inode, path: str, block_size: int) -> InodeSummary:
    if inode.inode_type in (SYMLINK_TYPE, LSYMLINK_TYPE):
        return InodeSummary(inode.inode_number, path, inode.file_size, kind="symlink",
                            symlink_target=inode.symlink_target)
    if inode.inode_type not in (FILE_TYPE, LREG_TYPE):
        kind = "device" if inode.inode_type in (BLKDEV_TYPE, CHRDEV_TYPE, LBLKDEV_TYPE, LCHRDEV_TYPE) else "ipc"
        return InodeSummary(inode.inode_number, path, 0, kind=kind)

    blocks = []
    pos = inode.blocks_start
    for size in inode.block_sizes:
        length = size & ~BLOCK_UNCOMPRESSED
        blocks.append(BlockRef(pos, length, not size & BLOCK_UNCOMPRESSED))
        pos += length
    tail = None
    if inode.fragment != NO_FRAGMENT:
        tail = TailRef(inode.fragment, inode.frag_offset, inode.file_size % block_size)
    return InodeSummary(inode.inode_number, path, inode.file_size, blocks=blocks, tail=tail)


def walk_inodes(image: bytes, sb: Superblock) -> List[InodeSummary]:
    """Every non-directory entry reachable from the root, with its full path, in walk order."""
    inodes, dirs = _metadata_streams(image, sb)
    results: List[InodeSummary] = []
    visited = set()
    stack = [("/", sb.root_inode_ref)]
    while stack:
        path, ref = stack.pop()
        inode = _parse_inode(inodes, ref, sb.block_size)
        if inode.inode_type not in (DIR_TYPE, LDIR_TYPE):
            results.append(_summarize(inode, path, sb.block_size))
            continue
        if ref in visited:
            raise DirectoryCycleError(f"directory cycle through inode {inode.inode_number} at {path}")
        visited.add(ref)
        children = _list_directory(dirs, inode)
        for name, child_ref in reversed(children):
            stack.append((posixpath.join(path, name), child_ref))
    logger.debug(f"[inodes] walked {len(results)} entries in {len(visited)} directories")
    return results


# ─── Inventory ────────────────────────────────────────────────────────────────

def build_inventory(image: bytes, sb: Optional[Superblock] = None) -> Inventory:
    """Fragment blocks (indices 0..F-1) followed by data blocks in offset order, with owners."""
    sb = sb or parse_superblock(image)
    fragments = load_fragment_table(image, sb)
    files = walk_inodes(image, sb)
    bs = sb.block_size

    block_units: Dict[int, FragmentRecord] = {}
    for summary in files:
        remaining = summary.file_size
        for number, ref in enumerate(summary.blocks):
            take = min(bs, remaining)
            remaining -= take
            if ref.sparse:
                continue
            if ref.start + ref.compressed_len > sb.bytes_used:
                raise TableRangeError(f"data block of {summary.file_path} beyond bytes_used")
            unit = block_units.setdefault(ref.start, FragmentRecord(
                index=-1, kind="block", start=ref.start, compressed_len=ref.compressed_len,
                is_compressed=ref.is_compressed, max_decompressed_len=bs,
            ))
            unit.owners.append(Owner(summary.inode_number, summary.file_path, ROLE_BLOCK, 0, take))
        if summary.tail is not None:
            if summary.tail.fragment_index >= len(fragments):
                raise TableRangeError(f"{summary.file_path} references missing fragment {summary.tail.fragment_index}")
            fragments[summary.tail.fragment_index].owners.append(Owner(
                summary.inode_number, summary.file_path, ROLE_TAIL, summary.tail.offset, summary.tail.length,
            ))

    units = list(fragments)
    for unit in sorted(block_units.values(), key=lambda u: u.start):
        unit.index = len(units)
        units.append(unit)

    by_start = {u.start: u.index for u in units if u.kind == "block"}
    for summary in files:
        summary.unit_ids = [by_start[ref.start] for ref in summary.blocks if not ref.sparse]
        if summary.tail is not None:
            summary.unit_ids.append(summary.tail.fragment_index)

    logger.info(
        f"[inventory] {len(files)} entries, {len(fragments)} fragment blocks, {len(block_units)} data blocks"
    )
    return Inventory(sb, units, files, fragment_blocks=len(fragments), data_blocks=len(block_units))


def unit_bytes(image: bytes, unit: FragmentRecord) -> bytes:
    return image[unit.start:unit.end]


def decompress_unit(image: bytes, unit: FragmentRecord) -> Optional[bytes]:
    """Payload of an intact unit, or None when it fails the oracle."""
    raw = unit_bytes(image, unit)
    if not unit.is_compressed:
        return raw
    return quick_check(raw, unit.max_decompressed_len)


def assemble_file(summary: InodeSummary, payloads: Dict[int, bytes], block_size: int) -> Optional[bytes]:
    """Rebuild a regular file from unit payloads; None when any unit is missing."""
    parts = []
    remaining = summary.file_size
    ids = iter(summary.unit_ids)
    for ref in summary.blocks:
        take = min(block_size, remaining)
        remaining -= take
        if ref.sparse:
            parts.append(bytes(take))
            continue
        payload = payloads.get(next(ids))
        if payload is None or len(payload) < take:
            return None
        parts.append(payload[:take])
    if summary.tail is not None:
        payload = payloads.get(next(ids))
        end = summary.tail.offset + summary.tail.length
        if payload is None or len(payload) < end:
            return None
        parts.append(payload[summary.tail.offset:end])
    return b"".join(parts)


def extract_files(image: bytes, inventory: Optional[Inventory] = None) -> Dict[str, bytes]:
    """Contents of every regular file of an intact image, keyed by path."""
    inventory = inventory or build_inventory(image)
    payloads = {}
    for unit in inventory.units:
        payload = decompress_unit(image, unit)
        if payload is None:
            raise SquashfsError(f"unit {unit.index} at {unit.start:#x} is corrupted")
        payloads[unit.index] = payload
    files = {}
    for summary in inventory.files:
        if summary.kind != "file":
            continue
        content = assemble_file(summary, payloads, inventory.superblock.block_size)
        if content is None or len(content) != summary.file_size:
            raise SquashfsError(f"{summary.file_path} does not match its declared size")
        files[summary.file_path] = content
    return files
