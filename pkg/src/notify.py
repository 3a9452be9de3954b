#!/usr/bin/env python3
"""
Unified Notifier - Timestamped, coloured terminal notices for library code.

Usage in any module:
    from src.notify import notify

    notify("📂 Loaded 256 images", "info")
    notify("✅ Checkpoint written", "success")
    notify("⚠️ Skipping undecodable image", "warning")
    notify("❌ Training aborted", "error")

Colours are dropped when stdout is not a terminal or NO_COLOR is set, so
test suites can grep plain text.
"""

import os
import sys
from datetime import datetime


TYPE_COLORS = {
    'info': '\033[94m',     # Blue
    'success': '\033[92m',  # Green
    'warning': '\033[93m',  # Yellow
    'error': '\033[91m',    # Red
}

TYPE_ICONS = {
    'info': 'ℹ️ ',
    'success': '✓',
    'warning': '⚠️ ',
    'error': '✗',
}


def _use_color() -> bool:
    return sys.stdout.isatty() and not os.environ.get('NO_COLOR')


def _format_cli_message(message: str, msg_type: str) -> str:
    timestamp = datetime.now().strftime('%H:%M:%S')
    icon = TYPE_ICONS.get(msg_type, '')
    if not _use_color():
        return f"[{timestamp}] {icon} {message}"
    return f"{TYPE_COLORS.get(msg_type, '')}[{timestamp}] {icon} {message}\033[0m"


def notify(message: str, msg_type: str = 'info') -> str:
    """
    Print a notification line. Warnings and errors go to stderr.

    Args:
        message: The message to display
        msg_type: One of 'info', 'success', 'warning', 'error'

    Returns:
        The formatted line
    """
    line = _format_cli_message(message, msg_type)
    stream = sys.stderr if msg_type in ('warning', 'error') else sys.stdout
    print(line, file=stream, flush=True)
    return line

