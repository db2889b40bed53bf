#!/usr/bin/env python3

import logging
from typing import Optional

def setup_logging(verbose=False, log_file: Optional[str] = None, colored: bool = True):
    """Set up console logging for bLoRA, colored unless disabled, optionally mirrored to a file"""
    try:
        import colorlog
        has_colorlog = True
    except ImportError:
        has_colorlog = False
    log_level = logging.DEBUG if verbose else logging.INFO
    logger = logging.getLogger('bLoRA')
    logger.setLevel(log_level)
    logger.propagate = False
    for hdlr in list(logger.handlers):
        logger.removeHandler(hdlr)
    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    if colored and has_colorlog:
        formatter = colorlog.ColoredFormatter(
            '%(log_color)s%(levelname)-8s%(reset)s %(message)s',
            log_colors={
                'DEBUG': 'cyan',
                'INFO': 'green',
                'WARNING': 'yellow',
                'ERROR': 'red',
                'CRITICAL': 'red,bg_white',
            }
        )
    else:
        formatter = logging.Formatter('%(levelname)-8s %(message)s')

    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(log_level)
        file_handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)-8s %(message)s'))
        logger.addHandler(file_handler)

    return logger
