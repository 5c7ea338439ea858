import os
import json
import csv
from typing import List, Dict, Iterable, Sequence

from utils.serialization import CorruptArtifactError


def get_json_data(json_path: str):
    if not os.path.exists(json_path):
        raise FileNotFoundError(json_path)
    with open(json_path, 'r', encoding='utf-8') as file:
        try:
            return json.load(file)
        except json.JSONDecodeError as e:
            raise CorruptArtifactError(f"{json_path}: {e}")


def write_json_data(data: Dict, json_path: str, force=False):
    if os.path.exists(json_path) and not force:
        raise FileExistsError(json_path)
    with open(json_path, 'w', encoding='utf-8') as file:
        json.dump(data, file, ensure_ascii=False, indent=2, sort_keys=True)
        file.write('\n')


def check_output_dir(output_path: str, force=False):
    """Create ``output_path``; refuse to reuse a non-empty one unless forced."""
    if os.path.exists(output_path) and os.listdir(output_path) and not force:
        raise FileExistsError(f"Output path {output_path} already exists and is not empty")
    os.makedirs(output_path, exist_ok=True)


def write_csv_data(rows: Iterable[Sequence], csv_path: str, header: Sequence[str] = None, append=False):
    new_file = not (append and os.path.exists(csv_path))
    with open(csv_path, 'a' if append else 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file)
        if header is not None and new_file:
            writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def get_csv_data(csv_path: str) -> List[Dict[str, str]]:
    with open(csv_path, 'r', encoding='utf-8', newline='') as file:
        return list(csv.DictReader(file))
