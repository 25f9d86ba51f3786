import sys
from pathlib import Path

# Добавляем корень проекта и каталог тестов в PYTHONPATH
sys.path.insert(0, str(Path(__file__).parent.parent))
sys.path.insert(0, str(Path(__file__).parent))
