#!/usr/bin/env python3
"""
Sequence Ingestion Engine for DepthProbe
Reads FASTA or plain-text prompt files and writes FASTA records
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from Bio import SeqIO
from Bio.Seq import Seq
from Bio.SeqRecord import SeqRecord

from core.errors import PromptFormatError
from core.model import ObjectiveMode, Prompt, encode_sequence

logger = logging.getLogger(__name__)


@dataclass
class SequenceRecord:
    """One named amino-acid sequence"""
    record_id: str
    sequence: str


@dataclass
class PromptSet:
    """Encoded prompts plus ingestion statistics"""
    prompts: List[Prompt] = field(default_factory=list)
    unknown_letters: int = 0
    source: str = ''

    def __len__(self) -> int:
        return len(self.prompts)


def _read_text(path: Union[str, Path]) -> str:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Prompt file not found: {path}")
    try:
        return path.read_text(encoding='utf-8')
    except UnicodeDecodeError as e:
        raise PromptFormatError(f"{path} is not UTF-8 text: {e}") from e


def parse_records(text: str) -> List[SequenceRecord]:
    """
    Parse FASTA (first non-blank character '>') or plain text, one sequence per line
    """
    stripped = text.lstrip()
    if not stripped:
        raise PromptFormatError("No sequences found")

    records = []
    if stripped.startswith('>'):
        for record in SeqIO.parse(io.StringIO(text), 'fasta'):
            sequence = str(record.seq).strip()
            if not sequence:
                raise PromptFormatError(f"FASTA record '{record.id}' has no sequence")
            records.append(SequenceRecord(record_id=record.id, sequence=sequence))
    else:
        for line_number, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if line:
                records.append(SequenceRecord(record_id=f'line{line_number}', sequence=line))

    if not records:
        raise PromptFormatError("No sequences found")
    return records


def read_records(path: Union[str, Path]) -> List[SequenceRecord]:
    return parse_records(_read_text(path))


def load_prompts(path: Union[str, Path], mode: Union[str, ObjectiveMode] = ObjectiveMode.MASKED) -> PromptSet:
    """
    Load and encode every sequence in a prompt file

    Letters outside the amino-acid alphabet map to UNK; their total is logged as a warning.
    """
    records = read_records(path)
    prompt_set = PromptSet(source=str(path))
    for record in records:
        ids, unknown = encode_sequence(record.sequence, mode)
        prompt_set.unknown_letters += unknown
        prompt_set.prompts.append(Prompt(tuple(ids), origin=record.record_id))

    if prompt_set.unknown_letters:
        logger.warning(f"{prompt_set.unknown_letters} unknown letter(s) in {path} mapped to UNK")
    logger.info(f"Loaded {len(prompt_set)} prompts from {path}")
    return prompt_set


def read_wildtype(path: Union[str, Path]) -> SequenceRecord:
    """First record of a FASTA / plain-text file"""
    records = read_records(path)
    if len(records) > 1:
        logger.warning(f"{path} holds {len(records)} records; using '{records[0].record_id}' as wildtype")
    record = records[0]
    return SequenceRecord(record_id=record.record_id, sequence=record.sequence.upper())


def write_fasta(path: Union[str, Path], records: Sequence[Tuple[str, str]]) -> Path:
    """Write (id, sequence) pairs as FASTA"""
    path = Path(path)
    seq_records = [SeqRecord(Seq(sequence), id=record_id, description='') for record_id, sequence in records]
    with open(path, 'w', encoding='utf-8') as handle:
        SeqIO.write(seq_records, handle, 'fasta')
    logger.debug(f"Wrote {len(seq_records)} FASTA records to {path}")
    return path
