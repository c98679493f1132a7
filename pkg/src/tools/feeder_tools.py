"""
Feeder file reader.
One record per line ("kind key=value ..."), '#' starts a comment; every error names
the file and line that caused it.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from src.exceptions import FeederParseError
from src.state import Branch, DerUnit, FeederModel

logger = logging.getLogger(__name__)


class FeederParser:
    """Parses the line-oriented feeder format into a FeederModel."""

    RECORD_FIELDS: Dict[str, Tuple[set, set]] = {
        # kind: (required keys, optional keys)
        "feeder": ({"name"}, set()),
        "base": ({"kva", "kv"}, set()),
        "slack": ({"node"}, {"v", "angle"}),
        "node": ({"name"}, set()),
        "line": ({"from", "to", "r", "x"}, {"b"}),
        "load": ({"node", "p_kw", "q_kvar"}, set()),
        "der": ({"node", "kva"}, {"pmin_kw"}),
        "monitor": ({"nodes"}, set()),
    }

    @staticmethod
    def parse_file(path: Union[str, Path]) -> FeederModel:
        """Read and parse a feeder file."""
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise FeederParseError(f"cannot read feeder file: {e}", path=str(path)) from e
        feeder = FeederParser.parse_text(text, source=str(path))
        logger.info(
            f"Parsed feeder '{feeder.name}' from {path}: {feeder.n_nodes} non-slack nodes, "
            f"{len(feeder.branches)} branches, {len(feeder.der_units)} DERs"
        )
        return feeder

    @staticmethod
    def parse_text(text: str, source: str = "<feeder>") -> FeederModel:
        """
        Parse feeder records from a string.

        Args:
            text: Feeder file contents
            source: Name used in error messages

        Returns:
            Validated FeederModel

        Raises:
            FeederParseError: on the first malformed or inconsistent record
        """
        records = FeederParser._tokenize(text, source)

        name = "feeder"
        base: Optional[Tuple[float, float]] = None
        slack: Optional[Tuple[str, float, float, int]] = None
        node_names: List[str] = []
        node_lines: Dict[str, int] = {}
        pending_lines: List[Tuple[int, Dict[str, str]]] = []
        pending_loads: List[Tuple[int, Dict[str, str]]] = []
        pending_ders: List[Tuple[int, Dict[str, str]]] = []
        monitor: Optional[Tuple[int, str]] = None

        for lineno, kind, fields in records:
            if kind == "feeder":
                name = fields["name"]
            elif kind == "base":
                base = (
                    FeederParser._number(fields, "kva", lineno, source),
                    FeederParser._number(fields, "kv", lineno, source),
                )
            elif kind == "slack":
                slack = (
                    fields["node"],
                    FeederParser._number(fields, "v", lineno, source, default=1.0),
                    FeederParser._number(fields, "angle", lineno, source, default=0.0),
                    lineno,
                )
            elif kind == "node":
                if fields["name"] in node_lines:
                    raise FeederParseError(
                        f"node '{fields['name']}' already declared on line {node_lines[fields['name']]}",
                        path=source, line=lineno,
                    )
                node_lines[fields["name"]] = lineno
                node_names.append(fields["name"])
            elif kind == "line":
                pending_lines.append((lineno, fields))
            elif kind == "load":
                pending_loads.append((lineno, fields))
            elif kind == "der":
                pending_ders.append((lineno, fields))
            elif kind == "monitor":
                monitor = (lineno, fields["nodes"])

        if base is None:
            raise FeederParseError("missing 'base' record", path=source)
        if slack is None:
            raise FeederParseError("missing 'slack' record", path=source)
        if not node_names or node_names[0] != slack[0]:
            raise FeederParseError(
                f"slack node '{slack[0]}' must be the first declared node", path=source, line=slack[3]
            )
        base_kva, base_kv = base
        index = {node: i for i, node in enumerate(node_names)}

        def resolve(node: str, lineno: int) -> int:
            if node not in index:
                raise FeederParseError(f"unknown node '{node}'", path=source, line=lineno)
            return index[node]

        branches = [
            Branch(
                from_node=resolve(fields["from"], lineno),
                to_node=resolve(fields["to"], lineno),
                r=FeederParser._number(fields, "r", lineno, source),
                x=FeederParser._number(fields, "x", lineno, source),
                b=FeederParser._number(fields, "b", lineno, source, default=0.0),
            )
            for lineno, fields in pending_lines
        ]
        for branch, (lineno, _) in zip(branches, pending_lines):
            if branch.from_node == branch.to_node:
                raise FeederParseError("line connects a node to itself", path=source, line=lineno)

        n = len(node_names) - 1
        load_p = np.zeros(n)
        load_q = np.zeros(n)
        for lineno, fields in pending_loads:
            node = resolve(fields["node"], lineno)
            if node == 0:
                raise FeederParseError("loads cannot sit on the slack node", path=source, line=lineno)
            load_p[node - 1] += FeederParser._number(fields, "p_kw", lineno, source) / base_kva
            load_q[node - 1] += FeederParser._number(fields, "q_kvar", lineno, source) / base_kva

        ders = []
        for lineno, fields in pending_ders:
            node = resolve(fields["node"], lineno)
            if node == 0:
                raise FeederParseError("DERs cannot sit on the slack node", path=source, line=lineno)
            kva = FeederParser._number(fields, "kva", lineno, source)
            if kva <= 0.0:
                raise FeederParseError("DER rating must be positive", path=source, line=lineno)
            pmin = FeederParser._number(fields, "pmin_kw", lineno, source, default=0.0)
            ders.append(DerUnit(node=node, rating=kva / base_kva, p_min=pmin / base_kva))

        if monitor is None or monitor[1] == "all":
            monitored = list(range(1, n + 1))
        else:
            lineno, spec = monitor
            monitored = [resolve(node.strip(), lineno) for node in spec.split(",") if node.strip()]
            if 0 in monitored:
                raise FeederParseError("the slack node cannot be monitored", path=source, line=lineno)

        try:
            return FeederModel(
                name=name,
                node_names=node_names,
                branches=branches,
                slack_magnitude=slack[1],
                slack_angle_deg=slack[2],
                base_kva=base_kva,
                base_kv=base_kv,
                der_units=ders,
                monitored=monitored,
                nominal_load_p=load_p,
                nominal_load_q=load_q,
            )
        except ValidationError as e:
            raise FeederParseError(f"inconsistent feeder: {e.errors()[0]['msg']}", path=source) from e

    @staticmethod
    def _tokenize(text: str, source: str) -> List[Tuple[int, str, Dict[str, str]]]:
        records = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            kind, *tokens = line.split()
            if kind not in FeederParser.RECORD_FIELDS:
                raise FeederParseError(f"unknown record kind '{kind}'", path=source, line=lineno)
            fields: Dict[str, str] = {}
            for token in tokens:
                key, sep, value = token.partition("=")
                if not sep or not key or not value:
                    raise FeederParseError(f"expected key=value, got '{token}'", path=source, line=lineno)
                fields[key] = value
            required, optional = FeederParser.RECORD_FIELDS[kind]
            missing = required - fields.keys()
            if missing:
                raise FeederParseError(
                    f"'{kind}' record missing {', '.join(sorted(missing))}", path=source, line=lineno
                )
            unknown = fields.keys() - required - optional
            if unknown:
                raise FeederParseError(
                    f"'{kind}' record has unknown field(s) {', '.join(sorted(unknown))}",
                    path=source, line=lineno,
                )
            records.append((lineno, kind, fields))
        return records

    @staticmethod
    def _number(fields: Dict[str, str], key: str, lineno: int, source: str,
                default: Optional[float] = None) -> float:
        if key not in fields:
            if default is None:
                raise FeederParseError(f"missing field '{key}'", path=source, line=lineno)
            return default
        try:
            value = float(fields[key])
        except ValueError:
            raise FeederParseError(f"field '{key}' is not a number: '{fields[key]}'",
                                   path=source, line=lineno) from None
        if not np.isfinite(value):
            raise FeederParseError(f"field '{key}' is not finite", path=source, line=lineno)
        return value
