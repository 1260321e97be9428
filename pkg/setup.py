"""
Setup script for Bounded Q-Learning.
"""

from setuptools import setup

setup(
    name="bounded_q_learning",
    version="1.0.0",
    description="Q-learning guided by Q-function bounds from bounded-parameter MDPs",
    author="User",
    py_modules=[
        "errors",
        "tabular_mdp",
        "interval_model",
        "regularized_bounds",
        "exploration",
        "learner",
        "environments",
        "config",
        "harness",
        "cli",
        "run_benchmark",
    ],
    install_requires=[
        "numpy>=1.22.0",
        "scipy>=1.8.0",
        "python-dotenv>=1.0.0",
        "tqdm>=4.60.0",
        "colorama>=0.4.4",
        "validators>=0.28.0",
    ],
    python_requires=">=3.8",
    entry_points={
        "console_scripts": [
            "bounded_q=cli:main",
            "bounded_q_benchmark=run_benchmark:main",
        ],
    },
)
