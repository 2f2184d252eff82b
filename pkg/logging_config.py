import logging
import os
import sys
from pprint import pformat

from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# Configure logging
def setup_logging():
    # Create logger
    logger = logging.getLogger("meta_navigator")
    logger.setLevel(LOG_LEVEL)

    # Module may be imported more than once under different runners
    if logger.handlers:
        return logger

    # Create console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(LOG_LEVEL)

    # Create formatter
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    console_handler.setFormatter(formatter)

    # Add handler to logger
    logger.addHandler(console_handler)

    return logger

# Get the logger
logger = setup_logging()

def log_request_info(request, message="Request received"):
    """Log detailed request information"""
    logger.info(f"{message}: {request.method} {request.url}")
    logger.debug(f"Request headers: {pformat(dict(request.headers))}")

def log_response_info(response, message="Response sent"):
    """Log detailed response information"""
    logger.info(f"{message}: Status {response.status_code}")
    logger.debug(f"Response headers: {pformat(dict(response.headers))}")

def log_iteration_info(record, message="Search iteration"):
    """Log one search/decode iteration record"""
    step2 = "-" if record.step2_loss is None else f"{record.step2_loss:.4f}"
    logger.debug(f"{message} {record.iteration} ({record.phase}): step1 loss {record.step1_loss:.4f}, step2 loss {step2}")
    logger.debug(f"Policy weights: {pformat(record.alphas)}")

def log_report_info(report, message="Evaluation finished"):
    """Log the headline numbers of an evaluation report"""
    logger.info(
        f"{message}: {report.policy_description} -> "
        f"{100 * report.mean_accuracy:.2f} ± {100 * report.ci95:.2f} "
        f"over {report.n_episodes} episodes ({report.n_failed} excluded)"
    )
