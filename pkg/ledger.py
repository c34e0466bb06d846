"""
Interpretation ledger linter
Every module declares the interpretive decisions it relies on in an INTERPRETATIONS
tuple; each one must have exactly one entry in docs/interpretations.json and a
section in docs/interpretations.md
"""
import ast
import glob
import logging
import os
import re
from dataclasses import dataclass, field

import simplejson as json

logger = logging.getLogger(__name__)

LEDGER_JSON = os.path.join('docs', 'interpretations.json')
LEDGER_MD = os.path.join('docs', 'interpretations.md')
REQUIRED_FIELDS = ('id', 'source', 'quote', 'ambiguity', 'decision', 'modules')
MINIMUM_ENTRIES = 14


@dataclass
class LedgerReport:
    passed: bool = True
    entries: int = 0
    declared: int = 0
    failures: list = field(default_factory=list)

    def fail(self, message):
        self.passed = False
        self.failures.append(message)

    def to_dict(self):
        return {'pass': self.passed, 'entries': self.entries, 'declared': self.declared,
                'failures': list(self.failures)}


def declared_interpretations(root):
    """{interpretation id: [module names]} from module-level INTERPRETATIONS tuples"""
    declared = {}
    for path in sorted(glob.glob(os.path.join(root, '*.py'))):
        module = os.path.splitext(os.path.basename(path))[0]
        with open(path) as f:
            tree = ast.parse(f.read(), filename=path)
        for node in tree.body:
            if isinstance(node, ast.Assign) and any(
                    isinstance(t, ast.Name) and t.id == 'INTERPRETATIONS' for t in node.targets):
                for item in ast.literal_eval(node.value):
                    declared.setdefault(item, []).append(module)
    return declared


def lint_ledger(root='.'):
    """Cross-check module declarations against the ledger files; returns a LedgerReport"""
    report = LedgerReport()
    json_path = os.path.join(root, LEDGER_JSON)
    md_path = os.path.join(root, LEDGER_MD)
    for path in (json_path, md_path):
        if not os.path.exists(path):
            report.fail(f"missing ledger file {path}")
    if not report.passed:
        return report

    with open(json_path) as f:
        entries = json.load(f).get('entries', [])
    with open(md_path) as f:
        md_sections = set(re.findall(r'^###\s+`?([\w-]+)`?\s*$', f.read(), flags=re.MULTILINE))

    report.entries = len(entries)
    by_id = {}
    for position, entry in enumerate(entries):
        missing_fields = [name for name in REQUIRED_FIELDS if not entry.get(name)]
        if missing_fields:
            report.fail(f"entry {position} ({entry.get('id', '?')}): missing {', '.join(missing_fields)}")
        entry_id = entry.get('id')
        if entry_id in by_id:
            report.fail(f"duplicate ledger entry '{entry_id}'")
        by_id[entry_id] = entry

    declared = declared_interpretations(root)
    report.declared = len(declared)
    for interpretation, modules in sorted(declared.items()):
        if interpretation not in by_id:
            report.fail(f"'{interpretation}' declared by {', '.join(modules)} has no ledger entry")
            continue
        listed = set(by_id[interpretation].get('modules', []))
        for module in modules:
            if module not in listed:
                report.fail(f"ledger entry '{interpretation}' does not list module {module}")
        if interpretation not in md_sections:
            report.fail(f"'{interpretation}' has no section in {LEDGER_MD}")
    for entry_id in by_id:
        if entry_id not in declared:
            report.fail(f"ledger entry '{entry_id}' is not declared by any module")

    if report.entries < MINIMUM_ENTRIES:
        report.fail(f"ledger has {report.entries} entries; at least {MINIMUM_ENTRIES} required")

    for failure in report.failures:
        logger.error(f"Ledger lint: {failure}")
    if report.passed:
        logger.info(f"Ledger lint passed: {report.entries} entries")
    return report
