from setuptools import setup

setup(
    name="hybridode",
    version="1.0.0",
    description="Hybrid mechanistic/data-driven modeling of controlled dynamical systems.",
    long_description="Trains neural ODE corrections on top of mechanistic priors (pendulum, propofol pharmacokinetics) and evaluates reconstruction, counterfactual and dose-selection quality.",
    author="HybridODE contributors",
    packages=["hybridode", "hybridode.utils", "hybridode.models"],
    package_data={"hybridode": ["config/pk_tables/*.yaml"]},
    python_requires=">=3.11",
    install_requires=[
        "numpy",
        "pandas",
        "scipy",
        "pyyaml",
        "packaging",
    ],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["hybridode=hybridode.main:main"]},
    data_files=[('share/hybridode/config', ['config/hybridode_example.yaml'])],
)
