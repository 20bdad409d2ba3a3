"""
Map Database Service
Sealed store of map entries with exact and approximate cosine k-NN search,
and the KMAP file format.
"""
import math
import struct
import zlib
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 30
EXACT_MODE_LIMIT = 100_000
RECALL_TARGET = 0.95
# tuned above the contract so unseen queries keep it
SELF_TEST_RECALL = 0.97


@dataclass(frozen=True, eq=False)
class MapEntry:
    entry_id: int
    world_pos: tuple
    descriptor: np.ndarray = field(repr=False)
    member_count: int = 4


@dataclass(frozen=True)
class Match:
    """A retrieved entry for one query keypoint; cosine distance = 1 - dot."""
    query_keypoint_idx: int
    entry_id: int
    cosine_distance: float
    map_pos: tuple = (math.nan, math.nan)


def _topk(distances, ids, k):
    """Indices of the k smallest distances, ties broken by entry id."""
    k = min(k, len(distances))
    if k < len(distances):
        # keep every candidate tied with the k-th distance before the exact sort
        kth = np.partition(distances, k - 1)[k - 1]
        pool = np.nonzero(distances <= kth)[0]
    else:
        pool = np.arange(len(distances))
    order = np.lexsort((ids[pool], distances[pool]))
    return pool[order[:k]]


class InvertedFileIndex:
    """
    Approximate cosine search: spherical k-means coarse quantizer with
    inverted lists; `n_probe` nearest lists are scanned exactly.
    """

    def __init__(self, descriptors, seed=0, n_iter=10):
        """Initialize the index over unit vectors."""
        self.descriptors = descriptors
        n = len(descriptors)
        self.n_lists = max(1, int(round(math.sqrt(n))))
        rng = np.random.default_rng(seed)
        centroids = descriptors[rng.choice(n, size=self.n_lists, replace=False)].copy()
        assignment = np.zeros(n, dtype=np.int64)
        for _ in range(n_iter):
            assignment = (descriptors @ centroids.T).argmax(axis=1)
            for c in range(self.n_lists):
                members = descriptors[assignment == c]
                if len(members):
                    mean = members.sum(axis=0)
                    norm = np.linalg.norm(mean)
                    if norm > 0:
                        centroids[c] = mean / norm
        self.centroids = centroids
        self.lists = [np.nonzero(assignment == c)[0] for c in range(self.n_lists)]
        self.n_probe = 1

    def candidates(self, query, n_probe=None):
        n_probe = min(n_probe or self.n_probe, self.n_lists)
        scores = self.centroids @ query
        probed = np.argsort(-scores, kind='stable')[:n_probe]
        return np.concatenate([self.lists[c] for c in probed])


class MapDatabase:
    """
    Immutable map: entry ids, positions, float32 descriptors and the index.
    Query methods never modify it.
    """

    def __init__(self, ids, positions, descriptors, member_counts, metadata=None):
        """Initialize and seal the database."""
        self._ids = np.asarray(ids, dtype=np.uint64)
        self._positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        self._descriptors = np.asarray(descriptors, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM)
        self._member_counts = np.asarray(member_counts, dtype=np.uint32)
        for array in (self._ids, self._positions, self._descriptors, self._member_counts):
            array.setflags(write=False)
        self._search = self._descriptors.astype(np.float64)
        self._search.setflags(write=False)
        self._sort_ids = self._ids.astype(np.int64)
        self._index = None
        self.metadata = dict(metadata or {})

    def __len__(self):
        return len(self._ids)

    @property
    def ids(self):
        return self._ids

    @property
    def positions(self):
        return self._positions

    @property
    def descriptors(self):
        return self._descriptors

    @property
    def member_counts(self):
        return self._member_counts

    @property
    def index(self):
        return self._index

    def _matches(self, query_idx, rows, distances):
        return [
            Match(query_idx, int(self._ids[r]), float(d), tuple(self._positions[r]))
            for r, d in zip(rows, distances)
        ]

    def exact_rows(self, descriptor, k):
        distances = 1.0 - self._search @ np.asarray(descriptor, dtype=np.float64)
        rows = _topk(distances, self._sort_ids, k)
        return rows, distances[rows]

    def approx_rows(self, descriptor, k, n_probe=None):
        if self._index is None:
            return self.exact_rows(descriptor, k)
        query = np.asarray(descriptor, dtype=np.float64)
        pool = self._index.candidates(query, n_probe)
        if len(pool) < min(k, len(self)):
            return self.exact_rows(descriptor, k)
        distances = 1.0 - self._search[pool] @ query
        picked = _topk(distances, self._sort_ids[pool], k)
        return pool[picked], distances[picked]

    def resolve_mode(self, mode):
        if mode == 'auto':
            return 'exact' if len(self) < EXACT_MODE_LIMIT else 'approx'
        if mode not in ('exact', 'approx'):
            raise ValueError(f"Unknown query mode '{mode}'")
        return mode


def build_index(entries, metadata=None, seed=0, recall_target=SELF_TEST_RECALL, n_self_test=100, k=20):
    """
    Seal entries into a database and build the approximate index.

    The probe count is doubled until the approximate path reaches
    `recall_target` recall@k against exact search on up to `n_self_test` of
    the database's own descriptors; the outcome is recorded in metadata.

    Args:
        entries (list): MapEntries
        metadata (dict, optional): Extra metadata
        seed (int): Seed for the quantizer and the self-test sample
        recall_target (float): Required recall@k
        n_self_test (int): Self-test queries
        k (int): Neighbours per query

    Returns:
        MapDatabase: Sealed database
    """
    if not entries:
        raise ValueError("Cannot build a map database without entries")

    descriptors = np.array([e.descriptor for e in entries], dtype=np.float32)
    db = MapDatabase(
        [e.entry_id for e in entries],
        [e.world_pos for e in entries],
        descriptors,
        [e.member_count for e in entries],
        metadata,
    )
    db.metadata.setdefault('version', MAP_VERSION)
    db.metadata['entries'] = len(db)

    index = InvertedFileIndex(db._search, seed=seed)
    rng = np.random.default_rng(seed)
    queries = db._search[rng.choice(len(db), size=min(n_self_test, len(db)), replace=False)]
    exact = [set(db.exact_rows(q, k)[0].tolist()) for q in queries]

    n_probe = 1
    while True:
        found = 0
        total = 0
        for q, truth in zip(queries, exact):
            pool = index.candidates(q, n_probe)
            if len(pool) < min(k, len(db)):
                got = truth
            else:
                distances = 1.0 - db._search[pool] @ q
                got = set(pool[_topk(distances, db._sort_ids[pool], k)].tolist())
            found += len(got & truth)
            total += len(truth)
        recall = found / total
        if recall >= recall_target or n_probe >= index.n_lists:
            break
        n_probe = min(2 * n_probe, index.n_lists)

    index.n_probe = n_probe
    db._index = index
    db.metadata.update({'index_lists': index.n_lists, 'index_probe': n_probe,
                        'self_test_recall': recall})
    if recall < recall_target:
        logger.warning("Index self-test recall %.3f below target %.2f", recall, recall_target)
    logger.debug("Index: %d lists, probe %d, recall %.3f", index.n_lists, n_probe, recall)
    return db


def query_knn(db, descriptor, k=20, mode='exact', query_keypoint_idx=0):
    """
    k nearest map entries by cosine distance.

    Args:
        db (MapDatabase): Database
        descriptor (np.ndarray): Unit query vector
        k (int): Number of neighbours
        mode (str): 'exact', 'approx' or 'auto'
        query_keypoint_idx (int): Index stored on the matches

    Returns:
        list: Matches ascending by distance (ties by entry id), min(k, |db|) long
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if db.resolve_mode(mode) == 'exact':
        rows, distances = db.exact_rows(descriptor, k)
    else:
        rows, distances = db.approx_rows(descriptor, k)
    return db._matches(query_keypoint_idx, rows, distances)


MAP_MAGIC = b'KMAP'
MAP_VERSION = 1
_MAP_HEADER = struct.Struct('<4sIQ')
_MAP_ENTRY = np.dtype([
    ('id', '<u8'), ('x', '<f8'), ('y', '<f8'), ('member_count', '<u4'),
    ('descriptor', '<f4', (DESCRIPTOR_DIM,)),
])
_CRC = struct.Struct('<I')


class MapFormatError(ValueError):
    """Base class for KMAP load failures."""


class BadMagicError(MapFormatError):
    pass


class UnsupportedVersionError(MapFormatError):
    pass


class TruncatedFileError(MapFormatError):
    pass


class ChecksumError(MapFormatError):
    pass


def save(db, path):
    """
    Write a database as KMAP (little-endian, CRC32 trailer).

    Args:
        db (MapDatabase): Database
        path (str): Destination file
    """
    records = np.zeros(len(db), dtype=_MAP_ENTRY)
    records['id'] = db.ids
    records['x'] = db.positions[:, 0]
    records['y'] = db.positions[:, 1]
    records['member_count'] = db.member_counts
    records['descriptor'] = db.descriptors
    body = _MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, len(db)) + records.tobytes()
    try:
        with open(path, 'wb') as f:
            f.write(body)
            f.write(_CRC.pack(zlib.crc32(body) & 0xFFFFFFFF))
    except OSError as e:
        raise OSError(f"Cannot write map '{path}': {e}") from e
    logger.info("Saved map with %d entries to %s", len(db), path)


def load(path):
    """
    Read a KMAP file and rebuild its index.

    Args:
        path (str): Source file

    Returns:
        MapDatabase: Sealed database

    Raises:
        BadMagicError, UnsupportedVersionError, TruncatedFileError, ChecksumError
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise OSError(f"Cannot read map '{path}': {e}") from e

    if len(data) < _MAP_HEADER.size:
        raise TruncatedFileError(f"Truncated map header in '{path}'")
    magic, version, count = _MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise BadMagicError(f"Bad magic {magic!r} in '{path}'")
    if version != MAP_VERSION:
        raise UnsupportedVersionError(f"Unsupported map version {version} in '{path}'")
    body_size = _MAP_HEADER.size + count * _MAP_ENTRY.itemsize
    if len(data) < body_size + _CRC.size:
        raise TruncatedFileError(f"Truncated map '{path}': {len(data)} of {body_size + _CRC.size} bytes")
    (stored_crc,) = _CRC.unpack_from(data, body_size)
    if zlib.crc32(data[:body_size]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"Checksum mismatch in '{path}'")

    records = np.frombuffer(data, dtype=_MAP_ENTRY, count=count, offset=_MAP_HEADER.size)
    entries = [
        MapEntry(int(r['id']), (float(r['x']), float(r['y'])), r['descriptor'].copy(),
                 int(r['member_count']))
        for r in records
    ]
    return build_index(entries, metadata={'version': version, 'source': str(path)})
