"""Export job description."""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_TEMPLATE = "a photo of a {}."


@dataclass(frozen=True)
class ExportManifest:
    model_id: str
    class_names: tuple[str, ...] = ()
    weights_out: str | None = None
    text_out: str | None = None
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def validate_class_names(self) -> None:
        if not self.class_names:
            raise ValueError("class name list is empty")
        bad = [n for n in self.class_names if not isinstance(n, str) or not n.strip()]
        if bad:
            raise ValueError(f"blank or non-string class names: {bad}")
        seen, dupes = set(), []
        for n in self.class_names:
            if n in seen:
                dupes.append(n)
            seen.add(n)
        if dupes:
            raise ValueError(f"duplicate class names: {sorted(set(dupes))}")

    def prompts(self) -> list[str]:
        self.validate_class_names()
        return [self.template.format(name) for name in self.class_names]
