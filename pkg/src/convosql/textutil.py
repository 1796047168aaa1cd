"""Text tokenization shared by the BM25 ranking paths."""

# CJK unified ideographs (+ ext A, + compatibility). Each codepoint in these
# ranges is its own token; everything else splits on non-alphanumeric runs.
_CJK_RANGES = (
    (0x4E00, 0x9FFF),
    (0x3400, 0x4DBF),
    (0xF900, 0xFAFF),
)


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def tokenize_text(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric, one token per CJK codepoint."""
    tokens: list[str] = []
    run: list[str] = []
    for ch in text.lower():
        if is_cjk(ch):
            if run:
                tokens.append("".join(run))
                run = []
            tokens.append(ch)
        elif ch.isalnum():
            run.append(ch)
        else:
            if run:
                tokens.append("".join(run))
                run = []
    if run:
        tokens.append("".join(run))
    return tokens
