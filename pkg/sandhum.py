#!/usr/bin/env python3
"""
SandHUM - sandwich beam observability and boundary control
"""

import sys
import os
import logging
import xdg.BaseDirectory

from cli.main import run


# Set up logging
def setup_logging(level: int = logging.INFO):
    app_dir = ensure_app_dirs()
    log_file = os.path.join(app_dir, 'sandhum.log')
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(log_file)
        ]
    )


def ensure_app_dirs():
    """Ensure application directories exist"""
    app_dir = xdg.BaseDirectory.save_data_path('sandhum')
    os.makedirs(app_dir, exist_ok=True)
    return app_dir


def main():
    """Main application entry point"""
    sys.exit(run(sys.argv[1:], setup=setup_logging))


if __name__ == "__main__":
    main()
