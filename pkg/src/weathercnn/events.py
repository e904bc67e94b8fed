"""Event kinds with their patch sizes and canonical channel order."""

from __future__ import annotations

from enum import IntEnum


class EventKind(IntEnum):
    TC = 0  # tropical cyclone
    AR = 1  # atmospheric river
    WF = 2  # weather front

    @property
    def code(self) -> str:
        return self.name.lower()

    @property
    def title(self) -> str:
        return _TITLES[self]

    @property
    def channels(self) -> tuple[str, ...]:
        return CHANNELS[self]

    @property
    def patch_size(self) -> tuple[int, int]:
        return PATCH_SIZE[self]

    @property
    def dims(self) -> tuple[int, int, int]:
        h, w = PATCH_SIZE[self]
        return (len(CHANNELS[self]), h, w)

    @classmethod
    def parse(cls, value) -> "EventKind":
        if isinstance(value, EventKind):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "tc": cls.TC, "tropicalcyclone": cls.TC,
            "ar": cls.AR, "atmosphericriver": cls.AR,
            "wf": cls.WF, "weatherfront": cls.WF, "weatherfronts": cls.WF,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown event kind {value!r}; expected tc, ar or wf") from None


_TITLES = {
    EventKind.TC: "TropicalCyclone",
    EventKind.AR: "AtmosphericRiver",
    EventKind.WF: "WeatherFront",
}

CHANNELS = {
    EventKind.TC: ("PSL", "VBOT", "UBOT", "T200", "T500", "TMQ", "V850", "U850"),
    EventKind.AR: ("TMQ", "LANDSEA"),
    EventKind.WF: ("T2M", "PRECIP", "SLP"),
}

PATCH_SIZE = {
    EventKind.TC: (32, 32),
    EventKind.AR: (148, 224),
    EventKind.WF: (27, 60),
}
