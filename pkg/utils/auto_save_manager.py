"""
Checkpoint auto-save manager.
Handles periodic, atomic saving of training checkpoints and finding the
resume point of an interrupted run.
"""

import json
import logging
import os
import shutil
from datetime import datetime
from typing import Callable, Dict, Optional

logger = logging.getLogger(__name__)

MODEL_FILE = "model.djtd"
OPTIMIZER_FILE = "optimizer.djtd"
STATE_FILE = "trainer_state.json"


class CheckpointAutoSaver:
    """Writes model / optimizer / trainer-state triples with atomic replace and one backup."""

    def __init__(self, save_dir: str, save_every: int = 250):
        """
        Args:
            save_dir: Directory holding the checkpoint files
            save_every: Save interval in training steps (0 disables periodic saves)
        """
        self.save_dir = save_dir
        self.save_every = save_every
        self.model_file = os.path.join(save_dir, MODEL_FILE)
        self.optimizer_file = os.path.join(save_dir, OPTIMIZER_FILE)
        self.state_file = os.path.join(save_dir, STATE_FILE)
        os.makedirs(save_dir, exist_ok=True)

    def due(self, step: int) -> bool:
        return self.save_every > 0 and step > 0 and step % self.save_every == 0

    def _atomic_write(self, path: str, writer: Callable[[str], None]):
        temp_path = path + ".tmp"
        writer(temp_path)
        if os.path.exists(path):
            root, ext = os.path.splitext(path)
            shutil.copy2(path, f"{root}_backup{ext}")
        shutil.move(temp_path, path)

    def save(self, write_model: Callable[[str], None], write_optimizer: Callable[[str], None],
             state: Dict) -> bool:
        """
        Save a checkpoint; the trainer state is written last so it only ever
        points at complete model and optimizer files.

        Returns:
            Success status
        """
        try:
            self._atomic_write(self.model_file, write_model)
            self._atomic_write(self.optimizer_file, write_optimizer)
            payload = dict(state, saved_at=datetime.now().isoformat())

            def write_state(path: str):
                with open(path, "w", encoding="utf-8") as f:
                    json.dump(payload, f, indent=2, sort_keys=True)

            self._atomic_write(self.state_file, write_state)
            logger.info(f"Checkpoint saved at {state.get('stage')} step {state.get('step')}")
            return True
        except OSError as e:
            logger.error(f"Error saving checkpoint: {e}")
            return False

    def latest(self) -> Optional[Dict]:
        """Trainer state of the last complete checkpoint, or None."""
        if not (os.path.exists(self.state_file) and os.path.exists(self.model_file)):
            return None
        try:
            with open(self.state_file, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error reading trainer state: {e}")
            return None

    def clear(self) -> bool:
        """Remove checkpoint files, backups and leftovers of interrupted writes."""
        try:
            for name in os.listdir(self.save_dir):
                if name.split(".")[0].split("_backup")[0] in ("model", "optimizer", "trainer_state"):
                    os.remove(os.path.join(self.save_dir, name))
            return True
        except OSError as e:
            logger.error(f"Error clearing checkpoints: {e}")
            return False
