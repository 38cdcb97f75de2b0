import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from gazesa import eval as _eval  # noqa: E402
from gazesa import shap_explain as _shap  # noqa: E402

# Session-wide audits: every explanation and every evaluation report built by any test
# is checked for local accuracy and RMSE >= MAE respectively.
AUDIT = {"explained": 0, "max_local_error": 0.0, "reports": 0, "rmse_below_mae": []}
ACCEPTANCE = {}

LOCAL_ACCURACY_TOL = 1e-9


def _audited_explanation_init(orig):
    def init(self, *args, **kwargs):
        orig(self, *args, **kwargs)
        if len(self):
            AUDIT["explained"] += len(self)
            AUDIT["max_local_error"] = max(AUDIT["max_local_error"], self.local_accuracy_error())
    return init


def _audited_report_init(orig):
    def init(self, *args, **kwargs):
        orig(self, *args, **kwargs)
        AUDIT["reports"] += 1
        for m in [self.pooled, *self.per_fold]:
            if m.rmse < m.mae * (1 - 1e-12):
                AUDIT["rmse_below_mae"].append((self.model, m.rmse, m.mae))
    return init


_shap.Explanation.__init__ = _audited_explanation_init(_shap.Explanation.__init__)
_eval.EvalReport.__init__ = _audited_report_init(_eval.EvalReport.__init__)


def audit_ok() -> bool:
    return AUDIT["max_local_error"] <= LOCAL_ACCURACY_TOL and not AUDIT["rmse_below_mae"]


def pytest_terminal_summary(terminalreporter):
    tr = terminalreporter
    if ACCEPTANCE:
        tr.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            tr.write_line(ACCEPTANCE[k])
    tr.section("session audits")
    tr.write_line(f"local accuracy: {AUDIT['explained']} explained instances, "
                  f"max |phi0 + sum(phi) - f(x)| = {AUDIT['max_local_error']:.3e} (tol {LOCAL_ACCURACY_TOL:g})")
    tr.write_line(f"RMSE >= MAE: {AUDIT['reports']} evaluation reports, {len(AUDIT['rmse_below_mae'])} violations")


def pytest_sessionfinish(session, exitstatus):
    if not audit_ok() and exitstatus == 0:
        session.exitstatus = 1

