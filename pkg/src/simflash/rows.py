"""Row encoding into 64-bit keys, equality masks and approximate range plans."""
from dataclasses import dataclass

from simflash.chip import match_page
from simflash.layout import ALL_SLOTS, FULL_MASK, SLOTS, slot_value


class ValueOverflow(ValueError):
    pass


class InvalidBounds(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    """A column stored at ``offset`` bits from the most significant end of the key."""

    offset: int
    width: int
    name: str = ""

    def __post_init__(self):
        if self.width < 1 or self.offset < 0 or self.offset + self.width > 64:
            raise ValueError(f"field {self.name or '?'} does not fit in 64 bits")

    @property
    def shift(self):
        return 64 - self.offset - self.width

    @property
    def mask(self):
        return ((1 << self.width) - 1) << self.shift

    def extract(self, key):
        return (key >> self.shift) & ((1 << self.width) - 1)

    def place(self, value):
        if not 0 <= value < (1 << self.width):
            raise ValueOverflow(f"{value} does not fit in {self.width} bits")
        return value << self.shift


def encode_row(values, fields):
    key = 0
    for v, f in zip(values, fields, strict=True):
        key |= f.place(v)
    return key


def decode_row(key, fields):
    return [f.extract(key) for f in fields]


def build_equality_query(field, value):
    return field.place(value), field.mask


def _top_bits_mask(field, keep):
    """Mask over the top ``keep`` bits of the field (``keep`` may be <= 0)."""
    if keep <= 0:
        return 0
    return ((1 << keep) - 1) << (field.shift + field.width - keep)


@dataclass(frozen=True)
class RangePlan:
    """Two chip queries; rows in range satisfy ``upper AND NOT lower``.

    ``upper_limit``/``lower_limit`` are the largest field values each
    sub-query accepts, for inspection.
    """

    field: FieldSpec
    low: int
    high: int
    strict: bool
    upper: tuple
    lower: tuple
    upper_limit: int
    lower_limit: int

    def combine(self, upper_bitmap, lower_bitmap):
        return upper_bitmap & ~lower_bitmap & ALL_SLOTS

    def admits(self, value):
        """Whether a field value survives the chip-side plan."""
        return value <= self.upper_limit and not value <= self.lower_limit

    def exact(self, value):
        if self.strict:
            return self.low < value < self.high
        return self.low <= value <= self.high


def decompose_range(low, high, field, strict=True):
    """Plan a range query as an upper power-of-two bound minus a lower one.

    With ``strict`` the range is ``low < k < high``, otherwise inclusive.  The
    upper sub-query keeps values below ``2**ceil(log2(high))`` (``high + 1``
    when inclusive); the lower one rounds ``low`` *down* to a power of two so
    the negation only ever widens the result.
    """
    if not 0 < low < high < (1 << field.width):
        raise InvalidBounds(f"need 0 < low < high < 2**{field.width}, got {low}, {high}")
    a = (high - 1).bit_length() if strict else high.bit_length()
    b = low.bit_length() - 1
    upper = (0, _top_bits_mask(field, field.width - a))
    lower = (0, _top_bits_mask(field, field.width - b))
    return RangePlan(field, low, high, strict, upper, lower, (1 << a) - 1, (1 << b) - 1)


def run_plan(plan, payload):
    """Execute both sub-queries against a logical page; returns the candidate bitmap."""
    up = match_page(payload, *plan.upper)
    lo = match_page(payload, *plan.lower)
    return plan.combine(up, lo)


def prefix_cover(lo, hi, width):
    """Aligned blocks ``(value, free_bits)`` whose union is exactly ``[lo, hi]``."""
    out = []
    while lo <= hi:
        free = (lo & -lo).bit_length() - 1 if lo else width
        while lo + (1 << free) - 1 > hi:
            free -= 1
        out.append((lo, free))
        lo += 1 << free
    return out


def second_pass_queries(plan):
    """Chip queries for a refining pass below the bits the first pass compared.

    Each query pins the field to one aligned block of the exact range; OR-ing
    their bitmaps and AND-ing with the first pass can only drop false
    positives.
    """
    lo, hi = (plan.low + 1, plan.high - 1) if plan.strict else (plan.low, plan.high)
    f = plan.field
    qs = []
    for value, free in prefix_cover(lo, hi, f.width):
        keep = f.width - free
        qs.append((value << f.shift, _top_bits_mask(f, keep)))
    return qs


def run_second_pass(plan, payload, candidates):
    hits = 0
    for key, mask in second_pass_queries(plan):
        hits |= match_page(payload, key, mask)
    return candidates & hits


def refine_range(plan, rows):
    """Host-side exact filter over gathered ``(slot, key)`` candidates."""
    return [(s, k) for s, k in rows if plan.exact(plan.field.extract(k))]


def rows_of(payload, bitmap):
    """``(slot, key)`` for every set slot of ``bitmap``."""
    return [(i, slot_value(payload, i)) for i in range(SLOTS) if bitmap >> i & 1]


__all__ = ["FieldSpec", "ValueOverflow", "InvalidBounds", "RangePlan", "encode_row",
           "decode_row", "build_equality_query", "decompose_range", "run_plan", "refine_range",
           "prefix_cover", "second_pass_queries", "run_second_pass", "rows_of", "FULL_MASK"]
